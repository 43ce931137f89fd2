"""Prototype-concept gray-box classifier with an interactive debugging loop."""

__version__ = "0.1.0"
