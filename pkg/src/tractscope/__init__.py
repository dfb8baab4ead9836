"""Tract-level outcome prediction from satellite tiles and places of interest."""

__version__ = "0.1.0"
