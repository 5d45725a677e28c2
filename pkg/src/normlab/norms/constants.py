"""Normalization constants for L1, L-infinity and Top(k) dispersion.

Each constant turns the scheme's dispersion of n Gaussian samples into an
estimate of sigma. C_L1 comes from the half-normal mean sigma*sqrt(2/pi).
C_Linf(n) is chosen so that C_Linf(n) * sigma * sqrt(2 ln n) equals the upper
bound u = (1 + sqrt(pi ln 4)) / 2 * sigma on the expected maximum absolute
deviation. C_TopK interpolates linearly in k between the two.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import List, NamedTuple, Optional

import numpy as np

from normlab.core.rng import Rng
from normlab.errors import KOutOfRange, NTooSmall
from normlab.utils.constants import MC_CHUNK, MC_MIN_TRIALS

logger = logging.getLogger(__name__)

_LINF_NUMERATOR = 1.0 + math.sqrt(math.pi * math.log(4.0))


class Scheme(str, Enum):
    L1 = "l1"
    LINF = "linf"
    TOPK = "topk"


@dataclass(frozen=True)
class ConstantQuery:
    """Which constant to compute: scheme, batch size n, and k for Top(k)."""

    scheme: Scheme
    n: int
    k: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.n < 2:
            raise NTooSmall(f"batch size n must be >= 2, got {self.n}")
        if self.scheme is Scheme.TOPK:
            if self.k is None or not 1 <= self.k <= self.n:
                raise KOutOfRange(f"Top(k) needs 1 <= k <= n={self.n}, got k={self.k}")

    @property
    def closed_form(self) -> float:
        if self.scheme is Scheme.L1:
            return c_l1()
        if self.scheme is Scheme.LINF:
            return c_linf(self.n)
        return c_topk(self.n, self.k)


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    trials: int
    seed: int


class LinfBounds(NamedTuple):
    """Bound corridor for C_Linf(n) * max|x - mu|, in units of sigma."""

    lower_stated: float
    lower_evaluated: float
    upper: float


def c_l1() -> float:
    """sqrt(pi / 2), about 1.2533141373."""
    return math.sqrt(math.pi / 2.0)


def c_linf(n: int) -> float:
    """(1 + sqrt(pi ln 4)) / (2 sqrt(2 ln n)); strictly decreasing in n."""
    if n < 2:
        raise NTooSmall(f"C_Linf(n) needs n >= 2, got {n}")
    return _LINF_NUMERATOR / (2.0 * math.sqrt(2.0 * math.log(n)))


def c_topk(n: int, k: int) -> float:
    """Linear interpolation from c_linf(n) at k=1 to c_l1() at k=n (endpoints exact)."""
    if n < 2:
        raise NTooSmall(f"C_TopK(n) needs n >= 2, got {n}")
    if not 1 <= k <= n:
        raise KOutOfRange(f"k={k} outside [1, {n}]")
    if k == 1:
        return c_linf(n)
    if k == n:
        return c_l1()
    lo = c_linf(n)
    return lo + ((k - 1) / (n - 1)) * (c_l1() - lo)


def constant_for(metric: str, n: int, k: Optional[int] = None) -> float:
    """Constant used by activation normalization for `metric` (1.0 for L2)."""
    if metric == "l2":
        return 1.0
    return ConstantQuery(Scheme(metric), n, k).closed_form


def linf_bounds() -> LinfBounds:
    return LinfBounds(
        lower_stated=0.793,
        lower_evaluated=_LINF_NUMERATOR / math.sqrt(8.0 * math.pi * math.log(2.0)),
        upper=_LINF_NUMERATOR / 2.0,
    )


def _batch_dispersion(z: np.ndarray, query: ConstantQuery) -> np.ndarray:
    mags = np.abs(z)
    n = query.n
    if query.scheme is Scheme.L1 or (query.scheme is Scheme.TOPK and query.k == n):
        return np.mean(mags, axis=1)
    if query.scheme is Scheme.LINF or query.k == 1:
        return np.max(mags, axis=1)
    top = np.partition(mags, n - query.k, axis=1)[:, n - query.k :]
    return np.mean(top, axis=1)


def mc_dispersion_ratio(
    query: ConstantQuery,
    trials: int,
    rng: Rng,
    center: bool = False,
    workers: int = 1,
    chunk: int = MC_CHUNK,
) -> McEstimate:
    """Monte Carlo estimate of E[C * dispersion / sigma] for standard normal batches.

    Args:
        query: scheme, n and k
        trials: number of batches (>= 1000)
        rng: source stream; chunks use streams spawned from it
        center: subtract the batch mean instead of the true mean 0
        workers: threads evaluating chunks; results are combined in chunk order
        chunk: batches per chunk

    Returns:
        McEstimate with mean ratio and its standard error
    """
    if trials < MC_MIN_TRIALS:
        raise ValueError(f"trials must be >= {MC_MIN_TRIALS}, got {trials}")

    sizes = [chunk] * (trials // chunk)
    if trials % chunk:
        sizes.append(trials % chunk)
    # fresh seed sequence: the estimate depends only on (query, trials, seed)
    streams = Rng(rng.seed).spawn(len(sizes))
    constant = query.closed_form

    def run_chunk(index: int) -> np.ndarray:
        z = streams[index].normal((sizes[index], query.n))
        if center:
            z = z - z.mean(axis=1, keepdims=True)
        return constant * _batch_dispersion(z, query)

    logger.info(f"MC {query.scheme.value} n={query.n} k={query.k}: {trials} trials in {len(sizes)} chunks")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts: List[np.ndarray] = list(pool.map(run_chunk, range(len(sizes))))
    else:
        parts = [run_chunk(i) for i in range(len(sizes))]

    ratios = np.concatenate(parts)
    stderr = float(np.std(ratios, ddof=1) / math.sqrt(trials))
    return McEstimate(value=float(np.mean(ratios)), stderr=stderr, trials=trials, seed=rng.seed)


__all__ = [
    "Scheme",
    "ConstantQuery",
    "McEstimate",
    "LinfBounds",
    "c_l1",
    "c_linf",
    "c_topk",
    "constant_for",
    "linf_bounds",
    "mc_dispersion_ratio",
]
