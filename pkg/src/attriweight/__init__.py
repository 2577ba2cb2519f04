"""Parameter-group-weighted training data attribution on small numpy models."""

__version__ = "0.1.0"
