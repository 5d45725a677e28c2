"""Weight normalization and bounded weight normalization.

    WN:  w_i = g_i * v_i / ||v_i||_2      (g_i learned)
    BWN: w_i = rho * v_i / ||v_i||_p      (rho fixed at initialization)

with rho = ||V||_p / N^(1/p) taken from the initial weights (p = 2 uses the
entrywise Frobenius norm). Channels are the leading axis; convolution
kernels are flattened per output channel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from normlab.core.tensor import Tensor, topk_mask
from normlab.errors import ZeroNormChannel

logger = logging.getLogger(__name__)

INF = float("inf")


class WeightNormMode(str, Enum):
    WN = "wn"
    BWN = "bwn"


def _check_p(p: float) -> float:
    p = float(p)
    if p not in (1.0, 2.0, INF):
        raise ValueError(f"norm order must be 1, 2 or inf, got {p}")
    return p


def _as_matrix(t: Tensor) -> Tensor:
    return t.reshape(t.shape[0], -1)


def channel_norms(v: Tensor, p: float = 2.0) -> Tensor:
    """Per-output-channel L^p norms, shape (N, 1)."""
    p = _check_p(p)
    m = _as_matrix(v)
    if p == 2.0:
        return m.square().sum(1).sqrt()
    if p == 1.0:
        return m.abs().sum(1)
    return m.max_abs(1)


def _nonzero_norms(v: Tensor, p: float) -> Tensor:
    norms = channel_norms(v, p)
    zero = np.flatnonzero(norms.data == 0.0)
    if zero.size:
        raise ZeroNormChannel(f"channels with zero norm: {zero.tolist()}")
    return norms


def wn_effective(v: Tensor, g: Tensor) -> Tensor:
    """w_i = g_i * v_i / ||v_i||_2; g has shape (N, 1)."""
    norms = _nonzero_norms(v, 2.0)
    return ((_as_matrix(v) / norms) * g).reshape(v.shape)


def bwn_effective(v: Tensor, rho: float, p: float = 2.0) -> Tensor:
    """w_i = rho * v_i / ||v_i||_p."""
    norms = _nonzero_norms(v, p)
    return ((_as_matrix(v) / norms) * rho).reshape(v.shape)


def rho_init(V: Tensor, p: float = 2.0, N: Optional[int] = None) -> float:
    """||V||_p / N^(1/p) of the freshly initialized weight (computed once, never updated)."""
    p = _check_p(p)
    N = V.shape[0] if N is None else N
    values = np.abs(V.data)
    if p == INF:
        return float(np.max(values))
    if p == 1.0:
        return float(np.sum(values)) / N
    return math.sqrt(float(np.sum(values * values))) / math.sqrt(N)


def _norm_direction(m: Tensor, norms: Tensor, p: float) -> Tensor:
    """d||v_i||_p / dv_i per channel (lowest index wins ties for p = inf)."""
    if p == 2.0:
        return m / norms
    if p == 1.0:
        return m.sign()
    mask = topk_mask(m, 1, 1).astype(np.float64)
    return m.sign() * Tensor.from_array(mask, m.precision)


def bwn_backward(grad_w: Tensor, v: Tensor, rho: float, p: float = 2.0) -> Tensor:
    """Gradient with respect to v of a loss with gradient grad_w at w = bwn_effective(v, rho, p).

    For p = 2 this is (rho / ||v_i||) (I - v_hat v_hat^T) grad_w_i.
    """
    p = _check_p(p)
    if grad_w.shape != v.shape:
        raise ValueError(f"grad_w shape {grad_w.shape} does not match v shape {v.shape}")
    norms = _nonzero_norms(v, p)
    m, gw = _as_matrix(v), _as_matrix(grad_w)
    inner = (gw * m).sum(1)
    radial = _norm_direction(m, norms, p) * (inner / norms)
    return ((gw - radial) * (rho / norms)).reshape(v.shape)


def wn_backward(grad_w: Tensor, v: Tensor, g: Tensor) -> Tuple[Tensor, Tensor]:
    """Gradients with respect to v and g for w = wn_effective(v, g)."""
    norms = _nonzero_norms(v, 2.0)
    m, gw = _as_matrix(v), _as_matrix(grad_w)
    v_hat = m / norms
    grad_g = (gw * v_hat).sum(1)
    grad_v = (gw - v_hat * grad_g) * (g / norms)
    return grad_v.reshape(v.shape), grad_g


def project_to_norm(v: Tensor, rho: float, p: float = 2.0) -> Tensor:
    """Rescale every channel of v to L^p norm rho ("project after step" hook)."""
    return bwn_effective(v, rho, p)


@dataclass(frozen=True)
class BoundedWeight:
    """Reparameterized weight: direction v plus g (WN) or a fixed rho (BWN)."""

    v: Tensor
    rho: float = 1.0
    p: float = 2.0
    mode: WeightNormMode = WeightNormMode.BWN
    g: Optional[Tensor] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "p", _check_p(self.p))
        object.__setattr__(self, "mode", WeightNormMode(self.mode))
        if self.rho <= 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.mode is WeightNormMode.WN and self.g is None:
            raise ValueError("weight-norm mode needs per-channel scales g")
        _nonzero_norms(self.v, self.p if self.mode is WeightNormMode.BWN else 2.0)

    @classmethod
    def from_init(cls, V: Tensor, p: float = 2.0, mode: WeightNormMode = WeightNormMode.BWN) -> "BoundedWeight":
        """Wrap freshly initialized weights; BWN fixes rho, WN starts with g_i = ||V_i||_2 (w == V)."""
        mode = WeightNormMode(mode)
        if mode is WeightNormMode.WN:
            return cls(v=V, p=2.0, mode=mode, g=channel_norms(V, 2.0))
        rho = rho_init(V, p, V.shape[0])
        logger.debug(f"BWN rho={rho:.6g} (p={p}, N={V.shape[0]})")
        return cls(v=V, rho=rho, p=p, mode=mode)

    @property
    def channels(self) -> int:
        return self.v.shape[0]

    def effective(self) -> Tensor:
        if self.mode is WeightNormMode.WN:
            return wn_effective(self.v, self.g)
        return bwn_effective(self.v, self.rho, self.p)

    def backward(self, grad_w: Tensor) -> Tuple[Tensor, Optional[Tensor]]:
        """(grad_v, grad_g); grad_g is None in BWN mode."""
        if self.mode is WeightNormMode.WN:
            return wn_backward(grad_w, self.v, self.g)
        return bwn_backward(grad_w, self.v, self.rho, self.p), None

    def with_params(self, v: Tensor, g: Optional[Tensor] = None) -> "BoundedWeight":
        return replace(self, v=v, g=g if g is not None else self.g)

    def with_rho(self, rho: float) -> "BoundedWeight":
        return replace(self, rho=rho)


def fold_rho_into_classifier(model):
    """Equivalent model with every BWN rho set to 1 and the removed scale pushed into the classifier.

    Walks the hidden layers front to back; each layer's `fold_rho(scale)` returns
    the rewritten layer and the cumulative factor by which its output shrank.
    The head's `absorb_scale(scale)` turns it into a plain linear classifier
    with weights multiplied by that factor.

    Raises:
        NonHomogeneousActivation: a layer is not positively 1-homogeneous
    """
    scale = 1.0
    folded = []
    *hidden, head = model.layers
    for layer in hidden:
        layer, scale = layer.fold_rho(scale)
        folded.append(layer)
    folded.append(head.absorb_scale(scale))
    logger.info(f"Folded rho product {scale:.6g} into the classifier")
    return model.with_layers(folded)


__all__ = [
    "WeightNormMode",
    "BoundedWeight",
    "channel_norms",
    "wn_effective",
    "bwn_effective",
    "rho_init",
    "bwn_backward",
    "wn_backward",
    "project_to_norm",
    "fold_rho_into_classifier",
]
