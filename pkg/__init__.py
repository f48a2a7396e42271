"""
Skill Injection Lab

Teaches a small character-level masked language model exact decimal arithmetic
while an EWC anchor keeps what it learned from text. Includes Fisher overlap
analysis, λ₁/λ₂ sweeps and a retention probe on held-out corpus windows.
"""
