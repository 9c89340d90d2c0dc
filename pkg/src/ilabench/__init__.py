"""Intermediate-level attack workbench."""

__version__ = "0.1.0"
