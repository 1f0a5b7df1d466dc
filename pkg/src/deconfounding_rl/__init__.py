"""Deconfounded offline RL on confounded observational data."""

__version__ = "0.1.0"
