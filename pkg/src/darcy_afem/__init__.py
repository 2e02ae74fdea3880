"""Adaptive MINI-element solver for Darcy-Forchheimer flow coupled with transport."""

__version__ = "0.1.0"
