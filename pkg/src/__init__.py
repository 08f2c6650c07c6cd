"""
GiVE desk-scale toolkit: instruction-conditioned image encoding on synthetic scenes
"""

__version__ = "1.0.0"
