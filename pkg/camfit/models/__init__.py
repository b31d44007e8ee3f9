"""
Pydantic models for camfit
"""
