"""Dense tensors with per-mode rounding semantics.

Every arithmetic result is computed in float64 and then rounded to the
tensor's PrecisionMode. In half precision that happens after each elementary
scalar operation, and reductions run sequentially left to right so overflow
behaviour is reproducible. F64/F32 reductions use numpy's own summation.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Sequence, Tuple, Union

import numpy as np

from normlab.core.precision import F64, Element, PrecisionMode
from normlab.errors import AxisOutOfRange, EmptyAxis, KOutOfRange, PrecisionMismatch, ShapeMismatch

Scalar = Union[int, float]
Operand = Union["Tensor", Scalar]


def _div_or_zero(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a / b with 0 wherever b == 0."""
    safe = np.where(b == 0.0, 1.0, b)
    return np.where(b == 0.0, 0.0, a / safe)


_BINARY: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
    "div_or_zero": _div_or_zero,
    "maximum": np.maximum,
}

_UNARY: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "abs": np.abs,
    "sign": np.sign,
    "neg": np.negative,
    "square": np.square,
    "sqrt": np.sqrt,
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "relu": lambda x: np.maximum(x, 0.0),
}

REDUCTIONS = ("sum", "mean", "max_abs", "min", "max")


class Tensor:
    """Immutable dense array interpreted under a PrecisionMode.

    Values are stored as float64; in F32/half modes every stored value is
    exactly representable in the element type.
    """

    __slots__ = ("_array", "_precision")

    def __init__(self, values: Union[Iterable, np.ndarray, Scalar], precision: PrecisionMode = F64) -> None:
        arr = np.array(values, dtype=np.float64)
        if precision.is_half and np.isnan(arr).any():
            raise ValueError("NaN inputs are not permitted in half precision")
        arr = precision.round(arr)
        if arr.flags.writeable and not arr.flags.owndata:
            arr = arr.copy()
        arr.setflags(write=False)
        self._array = arr
        self._precision = precision

    @classmethod
    def _wrap(cls, arr: np.ndarray, precision: PrecisionMode) -> "Tensor":
        """Adopt an already-rounded array without copying or validation."""
        obj = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.copy() if not arr.flags.owndata else arr
            arr.setflags(write=False)
        obj._array = arr
        obj._precision = precision
        return obj

    @classmethod
    def from_array(cls, arr: np.ndarray, precision: PrecisionMode = F64) -> "Tensor":
        """Round an operation result into a tensor (NaN allowed)."""
        return cls._wrap(precision.round(np.array(arr, dtype=np.float64)), precision)

    @classmethod
    def zeros(cls, shape: Sequence[int], precision: PrecisionMode = F64) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape)), precision)

    @classmethod
    def ones(cls, shape: Sequence[int], precision: PrecisionMode = F64) -> "Tensor":
        return cls._wrap(np.ones(tuple(shape)), precision)

    @classmethod
    def full(cls, shape: Sequence[int], value: float, precision: PrecisionMode = F64) -> "Tensor":
        return cls.from_array(np.full(tuple(shape), float(value)), precision)

    # -- views -----------------------------------------------------------

    @property
    def precision(self) -> PrecisionMode:
        return self._precision

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self._array.shape)

    @property
    def rank(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return int(self._array.size)

    @property
    def data(self) -> np.ndarray:
        """Flat read-only float64 view; len(data) == product(shape)."""
        return self._array.reshape(-1)

    @property
    def array(self) -> np.ndarray:
        """Shaped read-only float64 view."""
        return self._array

    def numpy(self) -> np.ndarray:
        """Writable float64 copy."""
        return self._array.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatch(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self._array.reshape(-1)[0])

    def __array__(self, dtype=None, copy=None) -> np.ndarray:
        return self._array.astype(dtype) if dtype is not None else self._array.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self._precision.label}, data={self._array.tolist()!r})"

    # -- data movement (exact, no rounding) ------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            return Tensor._wrap(self._array.reshape(shape), self._precision)
        except ValueError as e:
            raise ShapeMismatch(f"cannot reshape {self.shape} to {shape}: {e}") from None

    def transpose(self, *axes: int) -> "Tensor":
        return Tensor._wrap(np.ascontiguousarray(np.transpose(self._array, axes or None)), self._precision)

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def take(self, indices: Sequence[int], axis: int = 0) -> "Tensor":
        return Tensor._wrap(np.take(self._array, np.asarray(indices, dtype=np.intp), axis=axis), self._precision)

    def to(self, precision: PrecisionMode) -> "Tensor":
        """Re-interpret under another mode, rounding when narrowing."""
        if precision == self._precision:
            return self
        return Tensor._wrap(precision.round(self._array.copy()), precision)

    # -- arithmetic ------------------------------------------------------

    def __neg__(self) -> "Tensor":
        return elementwise("neg", self)

    def __add__(self, other: Operand) -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: Scalar) -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: Operand) -> "Tensor":
        return elementwise("sub", self, other)

    def __rsub__(self, other: Scalar) -> "Tensor":
        return elementwise("add", elementwise("neg", self), other)

    def __mul__(self, other: Operand) -> "Tensor":
        return elementwise("mul", self, other)

    def __rmul__(self, other: Scalar) -> "Tensor":
        return elementwise("mul", self, other)

    def __truediv__(self, other: Operand) -> "Tensor":
        return elementwise("div", self, other)

    def __rtruediv__(self, other: Scalar) -> "Tensor":
        return elementwise("div", Tensor.full(self.shape, other, self._precision), self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def abs(self) -> "Tensor":
        return elementwise("abs", self)

    def sign(self) -> "Tensor":
        return elementwise("sign", self)

    def scale(self, factor: float) -> "Tensor":
        return elementwise("scale", self, factor)

    def square(self) -> "Tensor":
        return elementwise("square", self)

    def sqrt(self) -> "Tensor":
        return elementwise("sqrt", self)

    def exp(self) -> "Tensor":
        return elementwise("exp", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def tanh(self) -> "Tensor":
        return elementwise("tanh", self)

    def div_or_zero(self, other: Operand) -> "Tensor":
        return elementwise("div_or_zero", self, other)

    def maximum(self, other: Operand) -> "Tensor":
        return elementwise("maximum", self, other)

    # -- reductions ------------------------------------------------------

    def sum(self, axis: int, keepdims: bool = True) -> "Tensor":
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: int, keepdims: bool = True) -> "Tensor":
        return reduce("mean", self, axis, keepdims)

    def max_abs(self, axis: int, keepdims: bool = True) -> "Tensor":
        return reduce("max_abs", self, axis, keepdims)

    def min(self, axis: int, keepdims: bool = True) -> "Tensor":
        return reduce("min", self, axis, keepdims)

    def max(self, axis: int, keepdims: bool = True) -> "Tensor":
        return reduce("max", self, axis, keepdims)

    def topk_abs(self, axis: int, k: int, keepdims: bool = True) -> "Tensor":
        return topk_abs(self, axis, k, keepdims)


def _check_precision(a: Tensor, b: Tensor) -> None:
    if a.precision != b.precision:
        raise PrecisionMismatch(f"operands differ in precision: {a.precision.label} vs {b.precision.label}")


def broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    """Result shape of a binary op, always the left operand's shape.

    Ranks must agree and only the right operand may broadcast, along axes
    where it has size 1. The left operand is never expanded.
    """
    if len(a) != len(b):
        raise ShapeMismatch(f"rank mismatch: {a} vs {b}")
    for da, db in zip(a, b):
        if da != db and db != 1:
            raise ShapeMismatch(f"shapes {a} and {b} do not broadcast")
    return tuple(a)


def elementwise(op: str, a: Tensor, b: Operand | None = None) -> Tensor:
    """Apply `op` elementwise and round to a's precision.

    Binary ops: add, sub, mul, div, div_or_zero, maximum, scale (b scalar).
    Unary ops: abs, sign, neg, square, sqrt, exp, log, tanh, relu.
    Division by zero follows IEEE semantics (+-inf / nan), it is not an error.
    """
    p = a.precision
    with np.errstate(all="ignore"):
        if op in _UNARY:
            if b is not None:
                raise TypeError(f"'{op}' is unary")
            return Tensor._wrap(p.round(_UNARY[op](a.array)), p)

        if op == "scale":
            if isinstance(b, Tensor) or b is None:
                raise TypeError("'scale' takes a scalar factor")
            op = "mul"

        if op not in _BINARY:
            raise ValueError(f"Unknown elementwise op '{op}'")
        if b is None:
            raise TypeError(f"'{op}' needs two operands")

        if isinstance(b, Tensor):
            _check_precision(a, b)
            broadcast_shape(a.shape, b.shape)
            rhs = b.array
        else:
            rhs = p.round(np.float64(b))
        return Tensor._wrap(p.round(_BINARY[op](a.array, rhs)), p)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product a[m x k] . b[k x n].

    Half+Same rounds each product and each running sum to binary16; Half+Wide
    rounds products to binary16, accumulates in float32 and rounds once at the end.
    """
    if a.rank != 2 or b.rank != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions disagree: {a.shape} x {b.shape}")
    _check_precision(a, b)

    p = a.precision
    A, B = a.array, b.array
    with np.errstate(all="ignore"):
        if not p.is_half:
            if p.element is Element.F32:
                out = np.matmul(A.astype(np.float32), B.astype(np.float32)).astype(np.float64)
            else:
                out = np.matmul(A, B)
            return Tensor._wrap(p.round(out), p)

        acc = np.zeros((A.shape[0], B.shape[1]))
        for j in range(A.shape[1]):
            products = p.round(np.multiply.outer(A[:, j], B[j, :]))
            acc = p.round_accumulator(acc + products)
        return Tensor._wrap(p.round(acc), p)


def _normalize_axis(t: Tensor, axis: int) -> int:
    if axis < 0:
        axis += t.rank
    if not 0 <= axis < t.rank:
        raise AxisOutOfRange(f"axis {axis} out of range for rank {t.rank}")
    if t.shape[axis] == 0:
        raise EmptyAxis(f"axis {axis} is empty")
    return axis


def _accumulate(values: np.ndarray, axis: int, p: PrecisionMode) -> np.ndarray:
    """Sum along axis (kept as size 1) with the mode's accumulation rules."""
    if not p.is_half:
        if p.element is Element.F32:
            return np.sum(values.astype(np.float32), axis=axis, keepdims=True, dtype=np.float32).astype(np.float64)
        return np.sum(values, axis=axis, keepdims=True)

    moved = np.moveaxis(values, axis, 0)
    acc = np.zeros(moved.shape[1:])
    for row in moved:
        acc = p.round_accumulator(acc + row)
    return np.expand_dims(p.round(acc), axis)


def reduce(op: str, t: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Reduce along `axis` with one of: sum, mean, max_abs, min, max."""
    if op not in REDUCTIONS:
        raise ValueError(f"Unknown reduction '{op}'")
    axis = _normalize_axis(t, axis)
    p = t.precision
    arr = t.array

    with np.errstate(all="ignore"):
        if op == "sum":
            out = _accumulate(arr, axis, p)
        elif op == "mean":
            n = p.round(np.float64(arr.shape[axis]))
            out = p.round(_accumulate(arr, axis, p) / n)
        elif op == "max_abs":
            out = np.max(np.abs(arr), axis=axis, keepdims=True)
        elif op == "min":
            out = np.min(arr, axis=axis, keepdims=True)
        else:
            out = np.max(arr, axis=axis, keepdims=True)

    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return Tensor._wrap(out, p)


def topk_mask(t: Tensor, axis: int, k: int) -> np.ndarray:
    """Boolean mask of the k largest-magnitude entries along axis (lower index wins ties)."""
    axis = _normalize_axis(t, axis)
    n = t.shape[axis]
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    order = np.argsort(-np.abs(t.array), axis=axis, kind="stable")
    chosen = np.take(order, np.arange(k), axis=axis)
    mask = np.zeros(t.shape, dtype=bool)
    np.put_along_axis(mask, chosen, True, axis=axis)
    return mask


def topk_abs(t: Tensor, axis: int, k: int, keepdims: bool = True) -> Tensor:
    """Mean of the k largest absolute values along axis.

    Selected magnitudes are summed in index order (unselected entries contribute
    exact zeros), so k = n reproduces mean(|t|) and k = 1 reproduces max_abs(t)
    bit for bit.
    """
    mask = topk_mask(t, axis, k)
    axis = _normalize_axis(t, axis)
    p = t.precision
    with np.errstate(all="ignore"):
        selected = np.where(mask, np.abs(t.array), 0.0)
        out = p.round(_accumulate(selected, axis, p) / p.round(np.float64(k)))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return Tensor._wrap(out, p)


__all__ = [
    "Tensor",
    "REDUCTIONS",
    "broadcast_shape",
    "elementwise",
    "matmul",
    "reduce",
    "topk_mask",
    "topk_abs",
]
