"""Shape-constrained convex regression: max-affine least squares with proximal ALM,
sGS-ADMM and constraint generation."""

__version__ = "0.1.0"
