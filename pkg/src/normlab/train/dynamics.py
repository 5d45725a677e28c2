"""SGD with weight decay, effective step sizes and their corrections.

For a layer followed by normalization the loss is invariant to the scale of
its weights, so an SGD step moves the weight direction by roughly
eta / ||w||^2. Weight decay acts only by keeping ||w|| small; the same effect
is reproduced without decay either by rescaling the learning rate with a
recorded weight-decay trajectory (lr-correction) or by pinning the weight
norm and raising it by sqrt(10) where the learning rate would drop by 10
(norm-schedule).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple, Union

import numpy as np

from normlab.core.rng import Rng
from normlab.core.tensor import Tensor
from normlab.errors import MissingTrajectory, NotScaleInvariant, ZeroNorm
from normlab.norms.activation import NormStats, StatsMode, norm_backward, norm_forward
from normlab.norms.weight import WeightNormMode, project_to_norm
from normlab.schema.experiment import NormScheme, OptimizerConfig
from normlab.schema.results import ClaimReport, NormGrowthReport
from normlab.train.trajectory import TrajectoryRecorder, TrajectoryStore
from normlab.utils.constants import BOUNDED_RATIO, GROWTH_FRACTION, NORM_SCHEDULE_FACTOR, TRAILING_WINDOW

logger = logging.getLogger(__name__)

_EMPTY_STATS = NormStats()

NormLike = Union[float, np.ndarray]


def sgd_step(w: Tensor, grad: Tensor, eta: float, lam: float = 0.0) -> Tensor:
    """w - eta * (grad + lam * w)."""
    if eta <= 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    if w.shape != grad.shape:
        raise ValueError(f"weight shape {w.shape} does not match gradient shape {grad.shape}")
    direction = grad if lam == 0 else grad + w * lam
    return w - direction * eta


def _l2(w: Union[Tensor, np.ndarray]) -> float:
    values = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64).reshape(-1)
    return float(np.sqrt(np.dot(values, values)))


def effective_step(eta: float, w: Union[Tensor, np.ndarray]) -> float:
    """eta / ||w||_2^2."""
    norm = _l2(w)
    if norm == 0.0:
        raise ZeroNorm("effective step size is undefined for a zero weight")
    return eta / (norm * norm)


def lr_correction(eta: float, w: Union[Tensor, np.ndarray], w_ref_norm: Optional[float]) -> float:
    """eta * ||w||^2 / ||w_ref||^2: the rate giving w the reference run's effective step.

    Raises:
        MissingTrajectory: no reference norm was recorded
    """
    if w_ref_norm is None:
        raise MissingTrajectory("lr correction needs a reference norm from a weight-decay run")
    if w_ref_norm <= 0:
        raise ZeroNorm(f"reference norm must be positive, got {w_ref_norm}")
    norm = _l2(w)
    return eta * (norm * norm) / (w_ref_norm * w_ref_norm)


class NormScheduleResult(NamedTuple):
    weight: Tensor
    target_norm: NormLike


def _channel_rows(w: Tensor) -> Tensor:
    return w.reshape(1, -1) if w.rank == 1 else w.reshape(w.shape[0], -1)


def norm_schedule_step(w: Tensor, target_norm: NormLike, decay_event: bool = False) -> NormScheduleResult:
    """Rescale every channel (row) of w to target_norm; a decay event first multiplies the target by sqrt(10).

    A 1-D weight is a single channel. `target_norm` may be a scalar or one value per channel.

    Raises:
        ZeroNorm: a channel has zero norm
    """
    target = np.asarray(target_norm, dtype=np.float64)
    if np.any(target <= 0):
        raise ValueError("target norm must be positive")
    if decay_event:
        target = target * NORM_SCHEDULE_FACTOR
    rows = _channel_rows(w)
    norms = rows.square().sum(1).sqrt()
    if np.any(norms.data == 0.0):
        raise ZeroNorm("cannot rescale a zero-norm channel")
    scale = Tensor.from_array(np.broadcast_to(target.reshape(-1, 1), norms.shape), w.precision)
    rescaled = ((rows / norms) * scale).reshape(w.shape)
    return NormScheduleResult(rescaled, float(target) if target.ndim == 0 else target)


# -- scale-invariant objective and the direction claim ---------------------


@dataclass
class ScaleInvariantObjective:
    """L(w) = 1/(2B) * ||norm(X W^T) - T||^2 on a fixed batch X and targets T.

    W (out x in) is the flattened parameter vector reshaped; the normalization
    runs without affine parameters and with a negligible epsilon, so
    L(alpha * w) == L(w) for every alpha > 0 up to rounding.
    """

    inputs: np.ndarray
    targets: np.ndarray
    out_features: int
    scheme: NormScheme = field(default_factory=lambda: NormScheme.batch_norm("l2", epsilon=1e-300, affine=False))

    @classmethod
    def random(
        cls,
        dim: int = 32,
        batch: int = 16,
        out_features: int = 4,
        seed: int = 0,
        metric: str = "l2",
        k: Optional[int] = None,
    ) -> "ScaleInvariantObjective":
        if dim % out_features:
            raise ValueError(f"dim {dim} is not a multiple of out_features {out_features}")
        x_rng, t_rng = Rng(seed).spawn(2)
        scheme = NormScheme.batch_norm(metric, k=k, epsilon=1e-300, affine=False)
        return cls(
            inputs=x_rng.normal((batch, dim // out_features)),
            targets=t_rng.normal((batch, out_features)),
            out_features=out_features,
            scheme=scheme,
        )

    @property
    def dim(self) -> int:
        return self.out_features * self.inputs.shape[1]

    def _weight(self, w: np.ndarray) -> Tensor:
        return Tensor(np.asarray(w, dtype=np.float64).reshape(self.out_features, -1))

    def _forward(self, w: np.ndarray):
        x = Tensor(self.inputs)
        W = self._weight(w)
        y, cache = norm_forward(x @ W.T, self.scheme, None, StatsMode.TRAIN, _EMPTY_STATS)
        return x, W, y, cache

    def loss(self, w: np.ndarray) -> float:
        _, _, y, _ = self._forward(w)
        diff = y.array - self.targets
        return float(0.5 * np.sum(diff * diff) / self.inputs.shape[0])

    def gradient(self, w: np.ndarray) -> np.ndarray:
        x, _, y, cache = self._forward(w)
        grad_y = Tensor((y.array - self.targets) / self.inputs.shape[0])
        grad_h, _, _ = norm_backward(grad_y, cache, self.scheme)
        return (grad_h.T @ x).data.copy()

    def check_invariance(self, w: np.ndarray, rtol: float = 1e-8) -> None:
        """Raise NotScaleInvariant unless L(2w) matches L(w) to rtol."""
        base, doubled = self.loss(w), self.loss(2.0 * np.asarray(w))
        if not math.isclose(base, doubled, rel_tol=rtol, abs_tol=0.0):
            raise NotScaleInvariant(f"L(2w)={doubled!r} differs from L(w)={base!r}")

    def gradient_scaling_error(self, w: np.ndarray) -> float:
        """Relative error of grad L(2w) against grad L(w) / 2."""
        half = 0.5 * self.gradient(w)
        return float(np.linalg.norm(self.gradient(2.0 * np.asarray(w)) - half) / np.linalg.norm(half))

    def radial_gradient(self, w: np.ndarray) -> float:
        """|w . grad L(w)| / (|w| |grad L(w)|); zero for an exactly invariant loss."""
        g = self.gradient(w)
        return float(abs(np.dot(w, g)) / (np.linalg.norm(w) * np.linalg.norm(g)))


def _direction_residual(objective: ScaleInvariantObjective, w0: np.ndarray, eta: float) -> Dict[str, float]:
    rho = float(np.linalg.norm(w0))
    w_hat = w0 / rho
    w1 = w0 - eta * objective.gradient(w0)
    actual = w1 / np.linalg.norm(w1)

    grad_hat = objective.gradient(w_hat)
    tangent = grad_hat - w_hat * np.dot(w_hat, grad_hat)
    claimed = w_hat - (eta / rho**2) * tangent
    return {
        "residual": float(np.linalg.norm(actual - claimed)),
        "orthogonality": float(abs(np.dot(w_hat, tangent))),
        "measured_step": float(np.linalg.norm(actual - w_hat) / np.linalg.norm(grad_hat)),
    }


def verify_direction_claim(objective: ScaleInvariantObjective, w0: np.ndarray, eta: float) -> ClaimReport:
    """Compare one SGD step's new weight direction with its first-order prediction.

    The predicted direction is w_hat - eta / rho^2 (I - w_hat w_hat^T) grad L(w_hat)
    with rho = ||w0||; the residual should shrink 4x when eta is halved.

    Raises:
        NotScaleInvariant: the objective fails the L(2w) == L(w) precheck
    """
    w0 = np.asarray(w0, dtype=np.float64).reshape(-1)
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if np.linalg.norm(w0) == 0.0:
        raise ZeroNorm("w0 must be non-zero")
    objective.check_invariance(w0)

    full = _direction_residual(objective, w0, eta)
    half = _direction_residual(objective, w0, eta / 2.0)
    ratio = full["residual"] / half["residual"] if half["residual"] > 0 else float("inf")
    report = ClaimReport(
        eta=eta,
        residual=full["residual"],
        residual_half_eta=half["residual"],
        ratio_at_half_eta=ratio,
        orthogonality=full["orthogonality"],
        gradient_scaling_error=objective.gradient_scaling_error(w0),
        radial_gradient=objective.radial_gradient(w0),
        measured_step=full["measured_step"],
        effective_step=effective_step(eta, w0),
    )
    logger.info(f"Direction claim at eta={eta:g}: residual={report.residual:.3e}, ratio={ratio:.3f}")
    return report


def claim_problem(seed: int, dim: int = 32) -> Tuple[ScaleInvariantObjective, np.ndarray]:
    """Seeded objective and starting point used by the claim experiment and CLI."""
    objective = ScaleInvariantObjective.random(dim=dim, seed=seed)
    w0 = Rng(seed).spawn(3)[2].normal((objective.dim,))
    return objective, w0


# -- norm growth -----------------------------------------------------------


def norm_growth_probe(
    trajectory: Union[TrajectoryRecorder, TrajectoryStore],
    window: int = TRAILING_WINDOW,
    growth_fraction: float = GROWTH_FRACTION,
    bounded_ratio: float = BOUNDED_RATIO,
) -> NormGrowthReport:
    """Summarize per-channel norm series of a run.

    growth: final norm above initial norm for at least `growth_fraction` of channels.
    bounded: over the last `window` steps every channel's max/min norm ratio stays below `bounded_ratio`.
    """
    store = trajectory.store if isinstance(trajectory, TrajectoryRecorder) else trajectory
    series: Dict[tuple, List[float]] = {}
    for record in store.records():
        series.setdefault((record.layer, record.channel), []).append(record.norm)

    if not series:
        return NormGrowthReport(
            channels=0, growing_fraction=0.0, growth=False, trailing_ratio=1.0, bounded=True, decreasing=False
        )

    growing = sum(1 for values in series.values() if values[-1] > values[0])
    fraction = growing / len(series)
    trailing = max(max(v[-window:]) / min(v[-window:]) for v in series.values())
    decreasing = all(all(b < a for a, b in zip(v, v[1:])) for v in series.values() if len(v) > 1)
    report = NormGrowthReport(
        channels=len(series),
        growing_fraction=fraction,
        growth=fraction >= growth_fraction,
        trailing_ratio=trailing,
        bounded=trailing < bounded_ratio,
        decreasing=decreasing,
    )
    logger.info(
        f"Norm growth: {growing}/{len(series)} channels grew, trailing max/min ratio {trailing:.3f}"
    )
    return report


# -- optimizer -------------------------------------------------------------


class Optimizer:
    """SGD over a Network's parameters in one of three modes.

    plain:          w <- w - eta_t (grad + lambda w) on the decayed parameters
    lr-correction:  normalized-layer weights use eta_t ||w_c||^2 / ||w_ref,c||^2 per channel,
                    with reference norms recorded at the same step of a weight-decay run
    norm-schedule:  constant eta; after each step normalized-layer channels are rescaled to
                    the reference norm of the next step (or their initial norm), times sqrt(10)
                    per decay event so far

    Weight decay applies to normalized-layer weights, or only to the classifier
    when `last_layer_only` is set.
    With `project_after_step`, BWN directions are projected back onto their
    rho-sphere after every update.
    """

    def __init__(
        self,
        config: OptimizerConfig,
        model,
        reference: Optional[TrajectoryStore] = None,
        steps_per_epoch: int = 1,
    ) -> None:
        self.config = config
        self.reference = reference
        self.steps_per_epoch = max(int(steps_per_epoch), 1)
        self._events: Dict[int, float] = {e.step: e.multiplier for e in config.schedule}
        if config.mode == "lr-correction" and reference is None:
            raise MissingTrajectory("lr-correction mode needs a reference trajectory")
        self._normalized = {i for i, _ in model.normalized_layers()}
        self._head = len(model.layers) - 1
        self._base_norms: Dict[int, np.ndarray] = {
            i: layer.channel_norms() for i, layer in model.normalized_layers()
        }

    def multiplier(self, step: int) -> float:
        """Product of schedule multipliers in force at `step`."""
        value = 1.0
        for event_step, factor in self._events.items():
            if event_step <= step:
                value *= factor
        if self.config.decay_every:
            epoch = step // self.steps_per_epoch
            value *= self.config.decay_factor ** (epoch // self.config.decay_every)
        return value

    def decay_count(self, step: int) -> int:
        """Number of decay events (multiplier < 1) in force at `step`."""
        count = sum(1 for s, f in self._events.items() if s <= step and f < 1.0)
        if self.config.decay_every and self.config.decay_factor < 1.0:
            count += (step // self.steps_per_epoch) // self.config.decay_every
        return count

    def learning_rate(self, step: int) -> float:
        if self.config.mode == "norm-schedule":
            return self.config.eta
        return self.config.eta * self.multiplier(step)

    def _decay(self, index: int, name: str) -> float:
        lam = self.config.weight_decay
        if lam == 0 or name != "weight":
            return 0.0
        if self.config.last_layer_only:
            return lam if index == self._head else 0.0
        return lam if index in self._normalized else 0.0

    def _corrected_rates(self, step: int, index: int, w: Tensor, eta: float) -> Tensor:
        rows = w.array.reshape(w.shape[0], -1)
        refs = self.reference.layer_norms(step, index, w.shape[0])
        rates = [lr_correction(eta, row, ref) for row, ref in zip(rows, refs)]
        shape = (w.shape[0],) + (1,) * (w.rank - 1)
        return Tensor.from_array(np.array(rates).reshape(shape), w.precision)

    def step(self, model, step: int) -> None:
        """Apply one update using the gradients stored by the last backward pass."""
        eta = self.learning_rate(step)
        for index, layer in enumerate(model.layers):
            grads = layer.gradients()
            for name, value in layer.parameters().items():
                grad = grads.get(name)
                if grad is None:
                    continue
                lam = self._decay(index, name)
                if self.config.mode == "lr-correction" and index in self._normalized and name == "weight":
                    rates = self._corrected_rates(step, index, value, eta)
                    direction = grad if lam == 0 else grad + value * lam
                    layer.set_parameter(name, value - direction * rates)
                else:
                    layer.set_parameter(name, sgd_step(value, grad, eta, lam))

        if self.config.mode == "norm-schedule":
            self._apply_norm_schedule(model, step + 1)
        if self.config.project_after_step:
            self._project_bounded(model)

    def _project_bounded(self, model) -> None:
        """Rescale the direction v of every BWN layer back to L^p norm rho per channel."""
        for _, layer in model.weight_layers():
            bounded = layer.bounded
            if bounded is None or bounded.mode is not WeightNormMode.BWN:
                continue
            layer.set_parameter("v", project_to_norm(bounded.v, bounded.rho, bounded.p))

    def _apply_norm_schedule(self, model, next_step: int) -> None:
        events = self.decay_count(next_step)
        decay_event = events > self.decay_count(next_step - 1)
        prior = NORM_SCHEDULE_FACTOR ** (events - 1 if decay_event else events)
        for index, layer in model.normalized_layers():
            if "weight" not in layer.parameters():
                continue
            if self.reference is not None:
                base = np.array(self.reference.layer_norms(next_step, index, layer.out_channels))
            else:
                base = self._base_norms[index]
            result = norm_schedule_step(layer.weight, base * prior, decay_event)
            layer.set_parameter("weight", result.weight)
        if decay_event:
            logger.info(f"Norm schedule: decay event at step {next_step}, target norms x{NORM_SCHEDULE_FACTOR:.4f}")


__all__ = [
    "sgd_step",
    "effective_step",
    "lr_correction",
    "NormScheduleResult",
    "norm_schedule_step",
    "ScaleInvariantObjective",
    "verify_direction_claim",
    "claim_problem",
    "norm_growth_probe",
    "Optimizer",
]
