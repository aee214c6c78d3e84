"""
Test suite for fedsim.
"""
