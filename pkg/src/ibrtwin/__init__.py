"""Data-driven ARMAX surrogate models of inverter-based resources."""

__version__ = "0.1.0"
