"""Boundary control workbench for the linear KP-II equation on a square."""

__version__ = "0.1.0"
