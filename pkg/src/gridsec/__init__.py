"""Power-grid state estimation and false-data-injection testbed."""

__version__ = "0.1.0"
