"""Desk-scale zero-shot object navigation with environmental attribute maps."""

__version__ = "0.1.0"
