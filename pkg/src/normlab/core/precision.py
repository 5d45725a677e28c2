"""Element precision modes and binary16 rounding.

Half precision is emulated: values are stored as float64 and rounded to the
nearest binary16 value (round-to-nearest-even) after every elementary
operation. numpy's float64 -> float16 cast performs that rounding directly
(no intermediate float32 step), including overflow to +-inf and subnormals.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Element(str, Enum):
    F64 = "f64"
    F32 = "f32"
    HALF = "half"


class Accumulator(str, Enum):
    SAME = "same"
    WIDE = "wide"  # 32-bit accumulation for half elements


@dataclass(frozen=True)
class PrecisionMode:
    """Element type plus accumulator width for reductions and matmul."""

    element: Element = Element.F64
    accumulator: Accumulator = Accumulator.SAME

    def __post_init__(self) -> None:
        if self.element is not Element.HALF and self.accumulator is not Accumulator.SAME:
            raise ValueError(f"{self.element.value} elements only support the 'same' accumulator")

    @property
    def is_half(self) -> bool:
        return self.element is Element.HALF

    @property
    def label(self) -> str:
        """Short name used in config files and CSV output ('f64', 'f32', 'half', 'half-wide')."""
        if self.is_half and self.accumulator is Accumulator.WIDE:
            return "half-wide"
        return self.element.value

    @classmethod
    def parse(cls, label: str) -> "PrecisionMode":
        """Inverse of `label`."""
        key = label.strip().lower().replace("_", "-")
        try:
            return _BY_LABEL[key]
        except KeyError:
            raise ValueError(f"Unknown precision '{label}'. Expected one of: {', '.join(_BY_LABEL)}") from None

    def round(self, values: np.ndarray) -> np.ndarray:
        """Round float64 values to this mode's element type (result is float64)."""
        return round_array(values, self.element)

    def round_accumulator(self, values: np.ndarray) -> np.ndarray:
        """Round a running sum to the accumulator width."""
        if self.is_half and self.accumulator is Accumulator.WIDE:
            return round_array(values, Element.F32)
        return round_array(values, self.element)

    def __str__(self) -> str:
        return self.label


F64 = PrecisionMode(Element.F64)
F32 = PrecisionMode(Element.F32)
HALF = PrecisionMode(Element.HALF)
HALF_WIDE = PrecisionMode(Element.HALF, Accumulator.WIDE)

_BY_LABEL = {"f64": F64, "f32": F32, "half": HALF, "half-wide": HALF_WIDE}


def round_array(values: np.ndarray, element: Element) -> np.ndarray:
    """Round an array to `element` and widen back to float64."""
    arr = np.asarray(values, dtype=np.float64)
    if element is Element.F64:
        return arr
    dtype = np.float32 if element is Element.F32 else np.float16
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        return arr.astype(dtype).astype(np.float64)


def round_half(value: float) -> float:
    """Nearest binary16 value of `value` (round-to-nearest-even).

    >>> round_half(1.0)
    1.0
    >>> round_half(65536.0)
    inf
    """
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        return float(np.float16(np.float64(value)))


__all__ = [
    "Element",
    "Accumulator",
    "PrecisionMode",
    "F64",
    "F32",
    "HALF",
    "HALF_WIDE",
    "round_array",
    "round_half",
]
