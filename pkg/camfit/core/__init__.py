"""
Core estimation, refinement and evaluation for camfit
"""
