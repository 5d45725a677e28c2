"""Training: dynamics, models, data, the training loop and experiments."""

from .data import *
from .dynamics import *
from .experiments import *
from .model import *
from .trainer import *
from .trajectory import *

__all__ = ["data", "dynamics", "experiments", "model", "trainer", "trajectory"]
