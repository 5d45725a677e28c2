"""Batch and layer normalization under L2, L1, L-infinity and Top(k) dispersion.

For a (batch, features) input x reduced along `scheme.axis`:

    mu   = mean(x)
    xc   = x - mu
    d    = L2:   sqrt(mean(xc^2))
           L1:   C_L1 * mean(|xc|)
           Linf: C_Linf(n) * max(|xc|)
           TopK: C_TopK(n, k) * Top(k)(|xc|)
    xhat = xc / (d + eps)
    y    = gamma * xhat + beta

Mean-only normalization skips the division. The backward pass treats mu and d
as functions of x. The L1 path needs only sign(xc); Linf/TopK additionally
route the dispersion gradient through the selected entries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from decimal import Decimal
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from normlab.core.precision import PrecisionMode
from normlab.core.tensor import Tensor, topk_mask
from normlab.errors import CacheMismatch, ReductionTooSmall, ShapeMismatch, UninitializedRunningStats
from normlab.norms.constants import constant_for
from normlab.schema.experiment import BATCH_AXIS, NormScheme
from normlab.utils.constants import DEFAULT_MOMENTUM

logger = logging.getLogger(__name__)


class StatsMode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class AffineParams:
    """Per-feature scale and shift, shape (1, features)."""

    gamma: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, features: int, precision: PrecisionMode) -> "AffineParams":
        return cls(Tensor.ones((1, features), precision), Tensor.zeros((1, features), precision))


@dataclass(frozen=True)
class NormStats:
    """Batch statistics of the last Train step plus running estimates for Eval."""

    mean: Optional[Tensor] = None
    dispersion: Optional[Tensor] = None
    running_mean: Optional[Tensor] = None
    running_dispersion: Optional[Tensor] = None
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self) -> None:
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None


@dataclass(frozen=True)
class NormCache:
    """What norm_backward needs from the forward pass.

    L1 keeps only x_hat and sign(xc); Linf/TopK add the selection mask.
    """

    scheme: NormScheme
    mode: StatsMode
    x_hat: Tensor
    n: int
    denominator: Optional[Tensor] = None
    dispersion: Optional[Tensor] = None
    signs: Optional[Tensor] = None
    selection: Optional[np.ndarray] = None
    selected: int = 0
    constant: float = 1.0
    gamma: Optional[Tensor] = None
    stats: Optional[NormStats] = None


def _reduction_size(x: Tensor, scheme: NormScheme) -> int:
    if x.rank != 2:
        raise ShapeMismatch(f"normalization expects a (batch, features) tensor, got shape {x.shape}")
    return x.shape[scheme.axis]


def _measure(xc: Tensor, scheme: NormScheme, n: int):
    """Dispersion of centered values plus what the backward pass needs."""
    axis = scheme.axis
    if scheme.metric == "l2":
        disp = xc.square().mean(axis).sqrt()
        if scheme.constant_scale != 1.0:
            disp = disp * scheme.constant_scale
        return disp, None, None, n, scheme.constant_scale

    k = {"l1": n, "linf": 1}.get(scheme.metric, scheme.k)
    constant = constant_for(scheme.metric, n, k) * scheme.constant_scale
    signs = xc.sign()
    if scheme.metric == "l1":
        return xc.abs().mean(axis) * constant, signs, None, n, constant
    if scheme.metric == "linf":
        return xc.max_abs(axis) * constant, signs, topk_mask(xc, axis, 1), 1, constant
    return xc.topk_abs(axis, k) * constant, signs, topk_mask(xc, axis, k), k, constant


def compute_stats(x: Tensor, scheme: NormScheme) -> NormStats:
    """Per-feature mean and constant-scaled dispersion along scheme.axis."""
    n = _reduction_size(x, scheme)
    if n < 2:
        raise ReductionTooSmall(f"reduction size must be >= 2, got {n}")
    mean = x.mean(scheme.axis)
    dispersion, *_ = _measure(x - mean, scheme, n)
    return NormStats(mean=mean, dispersion=dispersion)


def _complement(momentum: float) -> float:
    """1 - momentum, rounded from its decimal form so that 1 - 0.9 gives exactly 0.1."""
    return float(Decimal(1) - Decimal(repr(momentum)))


def update_running(stats: NormStats, batch_mean: Tensor, batch_dispersion: Optional[Tensor]) -> NormStats:
    """EMA update: running <- momentum * running + (1 - momentum) * batch.

    Uninitialized estimates start from mean 0 and dispersion 1.
    """
    keep = _complement(stats.momentum)
    running_mean = stats.running_mean
    if running_mean is None:
        running_mean = Tensor.zeros(batch_mean.shape, batch_mean.precision)
    running_mean = running_mean + (batch_mean - running_mean) * keep

    running_disp = stats.running_dispersion
    if batch_dispersion is not None:
        if running_disp is None:
            running_disp = Tensor.ones(batch_dispersion.shape, batch_dispersion.precision)
        running_disp = running_disp + (batch_dispersion - running_disp) * keep

    return replace(
        stats,
        mean=batch_mean,
        dispersion=batch_dispersion,
        running_mean=running_mean,
        running_dispersion=running_disp,
    )


def _affine(x_hat: Tensor, scheme: NormScheme, params: Optional[AffineParams]) -> Tensor:
    if not scheme.affine or params is None:
        return x_hat
    return x_hat * params.gamma + params.beta


def norm_forward(
    x: Tensor,
    scheme: NormScheme,
    params: Optional[AffineParams],
    stats_mode: StatsMode,
    stats: NormStats,
) -> Tuple[Tensor, NormCache]:
    """Normalize x; in Train mode the returned cache.stats carries the updated running estimates.

    Eval mode uses the running estimates for batch normalization. Layer
    normalization (axis 1) always normalizes each sample by its own statistics.
    """
    n = _reduction_size(x, scheme)
    mode = StatsMode(stats_mode)
    gamma = params.gamma if scheme.affine and params is not None else None
    uses_running = mode is StatsMode.EVAL and scheme.axis == BATCH_AXIS

    if uses_running:
        if not stats.initialized:
            raise UninitializedRunningStats("evaluation requires running statistics from a Train step")
        xc = x - stats.running_mean
        if scheme.mean_only:
            x_hat, denominator = xc, None
        else:
            denominator = stats.running_dispersion + scheme.epsilon
            x_hat = xc / denominator
        cache = NormCache(scheme, mode, x_hat, n, denominator=denominator, gamma=gamma, stats=stats)
        return _affine(x_hat, scheme, params), cache

    if n < 2:
        raise ReductionTooSmall(f"reduction size must be >= 2, got {n}")
    mean = x.mean(scheme.axis)
    xc = x - mean

    if scheme.mean_only:
        new_stats = stats
        if mode is StatsMode.TRAIN and scheme.axis == BATCH_AXIS:
            new_stats = update_running(stats, mean, None)
        cache = NormCache(scheme, mode, xc, n, gamma=gamma, stats=new_stats)
        return _affine(xc, scheme, params), cache

    dispersion, signs, selection, selected, constant = _measure(xc, scheme, n)
    denominator = dispersion + scheme.epsilon
    x_hat = xc / denominator

    new_stats = stats
    if mode is StatsMode.TRAIN and scheme.axis == BATCH_AXIS:
        new_stats = update_running(stats, mean, dispersion)

    cache = NormCache(
        scheme,
        mode,
        x_hat,
        n,
        denominator=denominator,
        dispersion=dispersion,
        signs=signs,
        selection=selection,
        selected=selected,
        constant=constant,
        gamma=gamma,
        stats=new_stats,
    )
    return _affine(x_hat, scheme, params), cache


def norm_backward(
    grad_y: Tensor, cache: NormCache, scheme: NormScheme
) -> Tuple[Tensor, Optional[Tensor], Optional[Tensor]]:
    """Gradients with respect to x, gamma and beta (gamma/beta are None without affine)."""
    if cache.mode is not StatsMode.TRAIN:
        raise CacheMismatch("backward needs a cache from a Train-mode forward pass")
    if cache.scheme != scheme:
        raise CacheMismatch("cache was produced under a different normalization scheme")
    if grad_y.shape != cache.x_hat.shape:
        raise CacheMismatch(f"gradient shape {grad_y.shape} does not match cached {cache.x_hat.shape}")

    axis = scheme.axis
    x_hat = cache.x_hat
    grad_gamma = grad_beta = None
    g = grad_y
    if cache.gamma is not None:
        grad_gamma = (grad_y * x_hat).sum(BATCH_AXIS)
        grad_beta = grad_y.sum(BATCH_AXIS)
        g = grad_y * cache.gamma

    if scheme.mean_only:
        dxc = g
    else:
        denominator = cache.denominator
        grad_disp = -(g * x_hat).sum(axis) / denominator
        if scheme.metric == "l2":
            # d(disp)/d(xc_j) = xc_j / (n * disp) = x_hat_j * denominator / (n * disp)
            coef = denominator.div_or_zero(cache.dispersion * cache.n)
            if scheme.constant_scale != 1.0:
                coef = coef * (scheme.constant_scale * scheme.constant_scale)
            ddisp = x_hat * coef
        else:
            ddisp = cache.signs * (cache.constant / cache.selected)
            if cache.selection is not None:
                ddisp = ddisp * Tensor.from_array(cache.selection.astype(np.float64), x_hat.precision)
        dxc = g / denominator + ddisp * grad_disp

    grad_x = dxc - dxc.mean(axis)
    return grad_x, grad_gamma, grad_beta


__all__ = [
    "StatsMode",
    "AffineParams",
    "NormStats",
    "NormCache",
    "compute_stats",
    "update_running",
    "norm_forward",
    "norm_backward",
]
