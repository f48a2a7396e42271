"""
Directional pipeline tests for the skill injection lab across configurations and seeds
"""
