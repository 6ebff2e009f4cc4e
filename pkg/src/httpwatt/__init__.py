"""Energy-aware HTTP multi-file transfers."""

__version__ = "0.1.0"
