"""Numerical toolkit for consumption problems under ratchet and drawdown constraints."""

__version__ = "0.1.0"
