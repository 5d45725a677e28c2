"""Command-line interface for normlab."""

__all__ = ["cli"]
