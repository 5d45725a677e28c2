"""Normalization: constants, activation normalization and weight normalization."""

from .activation import *
from .constants import *
from .weight import *

__all__ = ["activation", "constants", "weight"]
