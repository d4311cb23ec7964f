"""Importance sampling for small-noise diffusions."""
__version__ = "0.1.0"
