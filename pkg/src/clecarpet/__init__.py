"""Simulation and verification toolkit for the approximate chemical distance on CLE carpets."""

__version__ = "0.1.0"


class ConfigError(ValueError):
    """Invalid configuration or precondition on user-supplied parameters."""
