"""Slice profile estimation by matching internal patch distributions."""

__version__ = "0.1.0"
