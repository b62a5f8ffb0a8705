"""Radiative transport inverse-problem laboratory on the unit disk."""

__version__ = "0.1.0"
