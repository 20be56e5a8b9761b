"""Time-series classifiers for multichannel sequences with a subject attribute."""

__version__ = "0.1.0"
