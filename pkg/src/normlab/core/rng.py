"""Seeded random streams."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from normlab.core.precision import F64, PrecisionMode
from normlab.core.tensor import Tensor

ALGORITHM = "pcg64"


class Rng:
    """Reproducible generator: PCG64 seeded through numpy's SeedSequence.

    The same seed yields the same stream on every platform numpy supports.
    """

    def __init__(self, seed: int, _seed_seq: np.random.SeedSequence | None = None) -> None:
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.algorithm = ALGORITHM
        self._seed_seq = _seed_seq if _seed_seq is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(self._seed_seq))

    def spawn(self, count: int) -> List["Rng"]:
        """Independent child streams derived deterministically from this seed."""
        return [Rng(self.seed, _seed_seq=child) for child in self._seed_seq.spawn(count)]

    def normal(self, shape: Sequence[int], scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=tuple(shape))

    def normal_tensor(self, shape: Sequence[int], scale: float = 1.0, precision: PrecisionMode = F64) -> Tensor:
        return Tensor(self.normal(shape, scale), precision)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size: Sequence[int] | int) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float, high: float, size: Sequence[int] | int) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, algorithm={self.algorithm!r})"


__all__ = ["Rng", "ALGORITHM"]
