"""Low-cost binary neural network training engine and cost analyzers."""

__version__ = "0.1.0"
