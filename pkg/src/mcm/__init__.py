"""Masked reconstruction modelling for synthetic and augmented survival data."""

__version__ = "0.1.0"
