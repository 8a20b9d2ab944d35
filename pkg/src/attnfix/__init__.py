"""Runtime attention-map hot-fixing for small transformer encoders."""

__version__ = "0.1.0"
