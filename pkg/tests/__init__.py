"""
Test package for lightdarts.
"""
