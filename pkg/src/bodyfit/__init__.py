"""Body scan registration, shape-space learning and evaluation toolkit."""

__version__ = "0.1.0"
