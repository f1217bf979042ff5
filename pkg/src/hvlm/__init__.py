"""Hierarchical vision-language model for volumetric scans and their reports."""

__version__ = "0.1.0"
