"""Saddle-point dynamics for robust min-max training."""

__version__ = "0.1.0"
