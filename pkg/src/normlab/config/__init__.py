"""Configuration and settings management."""

from .settings import *

__all__ = ["settings"]
