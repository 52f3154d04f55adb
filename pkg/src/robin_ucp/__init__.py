"""Numerical workbench for the weighted frequency function of Robin problems on half-balls."""

__version__ = "0.1.0"
