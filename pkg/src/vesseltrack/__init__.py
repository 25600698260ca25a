"""Centerline tracking of tubular trees in 3D volumes.

The package covers the full loop: synthetic tree phantoms, volume raster
and patch extraction, spherical direction labels, a dilated-convolution
classifier forward pass, the iterative tracker, and overlap/accuracy metrics.
"""

__version__ = "0.1.0"
