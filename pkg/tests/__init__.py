"""
Test suite for sackit.
"""
