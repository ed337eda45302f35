"""Deterministic CPU tile-based Gaussian splatting with analytic gradients."""

__version__ = "0.1.0"
