"""
Test suite for camfit
"""
