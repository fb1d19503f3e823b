"""Iterative optimizer for three-layer agent skill packages."""

__version__ = "0.1.0"
