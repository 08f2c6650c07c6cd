"""
Test suite for the GiVE desk-scale toolkit
"""
