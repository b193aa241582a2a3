"""Numerical laboratory for costate propagation in critic-free policy optimization."""

__version__ = "0.1.0"
