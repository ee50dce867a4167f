"""Boundary element methods for the heat equation on moving planar domains."""

__version__ = "0.1.0"
