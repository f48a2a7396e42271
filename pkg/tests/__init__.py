"""
Test suite for the Skill Injection Lab

This test suite includes:
- Gradient checks for the numerics engine and the full model
- Unit tests for data generation, losses, Fisher scores and evaluation
- Training determinism and reduction checks
- End-to-end runs of the command-line entry point
"""
