"""Session-aware masked-item sequential recommendation."""

__version__ = "0.1.0"
