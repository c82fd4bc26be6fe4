"""Numerical checks of g-expectations, g-martingales and g-harmonic functions."""

__version__ = "0.1.0"
