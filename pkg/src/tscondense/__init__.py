"""Time series dataset condensation by frequency and training-trajectory matching."""

__version__ = "0.1.0"
