"""
light-DARTS: differentiable architecture search for fake audio detection.
"""

__version__ = "1.0.0"
