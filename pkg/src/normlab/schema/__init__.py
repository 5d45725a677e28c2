"""Data models and validation schemas."""

from .experiment import *
from .results import *

__all__ = ["experiment", "results"]
