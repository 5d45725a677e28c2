"""Shared utilities."""

__all__ = []
