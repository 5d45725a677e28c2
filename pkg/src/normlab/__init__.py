"""normlab - L^p batch normalization, bounded weight normalization and weight-decay dynamics."""

__version__ = "0.1.0"
