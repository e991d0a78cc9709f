"""Flow-indexed packet capture archive."""

__version__ = "0.1.0"
