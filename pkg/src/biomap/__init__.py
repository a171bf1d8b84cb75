"""High-resolution species, biodiversity-indicator and habitat mapping."""

__version__ = "0.1.0"
