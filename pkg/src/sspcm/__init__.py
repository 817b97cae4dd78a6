"""Semi-supervised 2D pose estimation with position-inconsistency pseudo-label correction.

Desk-scale numpy implementation on synthetic stick figures.
"""
__version__ = "0.1.0"
