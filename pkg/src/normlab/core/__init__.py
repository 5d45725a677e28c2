"""Numeric core: precision modes, tensors, random streams and the tensor codec."""

from .precision import *
from .rng import *
from .serialize import *
from .tensor import *

__all__ = ["precision", "rng", "serialize", "tensor"]
