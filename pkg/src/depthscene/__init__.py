"""Probabilistic tabletop scene perception from depth images."""

__version__ = "0.1.0"
