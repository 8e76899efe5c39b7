"""Variational transformer codec for gridded atmospheric fields."""

__version__ = "0.1.0"
