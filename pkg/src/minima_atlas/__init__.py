"""Numerical lab for zero-loss sets and gradient flows of two-layer networks."""

__version__ = "0.1.0"
