"""Numerical laboratory for stabilized scalar curvature on structured charts."""

__version__ = "0.1.0"
