"""Masked conditional-synthesis OOD detection."""

__version__ = "0.1.0"
