"""Multi-arm desk-scale experiments.

Each experiment expands a base ExperimentConfig into named arms, runs them,
writes `<arm>.csv` per arm plus `summary.csv`, and returns an
ExperimentResult. A failing or diverging arm is recorded as a Diagnostic and
never stops the remaining arms. Arms that share a model spec and seed start
from identical weights.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from normlab.core.precision import F32, HALF
from normlab.core.rng import Rng
from normlab.core.tensor import Tensor
from normlab.errors import NormlabError, describe_error
from normlab.norms.activation import StatsMode
from normlab.norms.constants import ConstantQuery, Scheme, c_l1, mc_dispersion_ratio
from normlab.norms.weight import fold_rho_into_classifier
from normlab.schema.experiment import ExperimentConfig
from normlab.schema.results import ArmResult, Diagnostic, ExperimentResult
from normlab.train.dynamics import claim_problem, norm_growth_probe, verify_direction_claim
from normlab.train.trainer import Trainer, emit_csv
from normlab.utils.constants import (
    CONSTANTS_CSV_HEADER,
    CSV_DECIMALS,
    DEFAULT_TOPK,
    DESK_DECAY_EVERY_EPOCHS,
    DEFAULT_WEIGHT_DECAY,
    LINF_CORRIDOR,
)
from normlab.utils.fileio import write_file_atomic
from normlab.utils.logging import arm_context
from normlab.utils.validation import validate_arm_name

logger = logging.getLogger(__name__)

EXPERIMENTS = (
    "wd-equivalence",
    "norm-schedule",
    "constants",
    "claim",
    "half-precision",
    "bwn-invariance",
    "lp-compare",
    "constant-importance",
    "weight-norm-compare",
)

SUMMARY_HEADER = ("arm", "final_val_acc", "diverged", "epochs", "flags")
HALF_PRECISION_SCALE = 300.0
ACCURACY_TOLERANCE = 0.02
BWN_NORM_RTOL = 1e-6
FOLD_RTOL = 1e-9


@dataclass
class Arm:
    """A named training job; `reference_arm` names the arm whose trajectory it replays."""

    name: str
    config: ExperimentConfig
    reference_arm: Optional[str] = None
    flags: Dict[str, object] = field(default_factory=dict)


def _fmt(value: float) -> str:
    return f"{value:.{CSV_DECIMALS}f}"


def _update(config: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy of config with nested sections partially replaced (validated)."""
    data = config.model_dump()
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key].update(value)
        else:
            data[key] = value
    return ExperimentConfig.model_validate(data)


def _with_norms(config: ExperimentConfig, **norm_updates) -> ExperimentConfig:
    """Apply norm_updates to every normalized layer of the model."""
    layers = []
    for layer in config.model.layers:
        dumped = layer.model_dump()
        if layer.norm is not None:
            dumped["norm"].update(norm_updates)
        layers.append(dumped)
    return _update(config, model={"layers": layers})


def _normalized_layer_count(config: ExperimentConfig) -> int:
    return sum(1 for layer in config.model.layers if layer.norm is not None)


def _with_decay_events(config: ExperimentConfig) -> ExperimentConfig:
    opt = config.optimizer
    if opt.decay_every is None and not opt.schedule:
        return _update(config, optimizer={"decay_every": DESK_DECAY_EVERY_EPOCHS})
    return config


# -- arm execution ------------------------------------------------------


def _train_arm(arm: Arm, out_dir: Path) -> Tuple[ArmResult, Optional[Trainer]]:
    """Train one arm and write `<arm>.csv`; failures become error diagnostics."""
    ok, error = validate_arm_name(arm.name)
    if not ok:
        raise ValueError(error)
    try:
        with arm_context(arm.name):
            trainer = Trainer(arm.config)
            result = trainer.run()
    except (NormlabError, OSError) as e:
        payload = describe_error(e)
        logger.error(f"Arm {arm.name} failed: {payload['message']}")
        diagnostic = Diagnostic(
            stage="train", severity="error", arm=arm.name, message=f"{payload['code']}: {payload['message']}"
        )
        return ArmResult(name=arm.name, flags=dict(arm.flags), diagnostics=[diagnostic]), None

    diagnostics: List[Diagnostic] = []
    if result.diverged:
        info = result.divergence
        diagnostics.append(
            Diagnostic(
                stage="train",
                severity="warning",
                arm=arm.name,
                message=f"DIVERGED at epoch {info.epoch}, step {info.step}",
                suggestion="Lower the learning rate or use a wider precision",
            )
        )
    growth = norm_growth_probe(trainer.recorder)
    flags = dict(arm.flags, norm_growth=growth.growth, norm_bounded=growth.bounded)
    csv_path = emit_csv(result, out_dir / f"{arm.name}.csv")
    return ArmResult(name=arm.name, result=result, csv_path=csv_path, flags=flags, diagnostics=diagnostics), trainer


def _run_arm_job(arm: Arm, out_dir: Path) -> Tuple[ArmResult, Optional[Path]]:
    """Worker entry point: train and, for a clean run, write `<arm>_trajectory.csv`."""
    arm_result, trainer = _train_arm(arm, out_dir)
    if trainer is None or arm_result.result.diverged:
        return arm_result, None
    return arm_result, trainer.recorder.store.write(out_dir / f"{arm.name}_trajectory.csv")


def run_arms(arms: List[Arm], out_dir: Path, workers: int = 1) -> Tuple[List[ArmResult], Dict[str, Path]]:
    """Run arms in dependency order; independent arms may run in worker processes.

    An arm with `reference_arm` starts after that arm and replays the
    trajectory file it wrote. Returns results in the order given plus the
    trajectory file of every arm that finished cleanly.
    """
    results: Dict[str, ArmResult] = {}
    trajectories: Dict[str, Path] = {}
    pending = list(arms)

    while pending:
        ready = [a for a in pending if a.reference_arm is None or a.reference_arm in results]
        if not ready:
            raise ValueError("arm references form a cycle or name an unknown arm")
        jobs = []
        for arm in ready:
            pending.remove(arm)
            if arm.reference_arm is None:
                jobs.append(arm)
            elif arm.reference_arm in trajectories:
                path = trajectories[arm.reference_arm]
                jobs.append(Arm(arm.name, _update(arm.config, optimizer={"trajectory": path}), None, arm.flags))
            else:
                message = f"MISSING_TRAJECTORY: reference arm '{arm.reference_arm}' produced no trajectory"
                diag = Diagnostic(stage="experiment", severity="error", arm=arm.name, message=message)
                results[arm.name] = ArmResult(name=arm.name, flags=dict(arm.flags), diagnostics=[diag])

        for arm in jobs:
            logger.info(f"Starting arm {arm.name}")
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_arm_job, arm, out_dir) for arm in jobs]
                outcomes = [f.result() for f in futures]
        else:
            outcomes = [_run_arm_job(arm, out_dir) for arm in jobs]

        for arm, (arm_result, trajectory) in zip(jobs, outcomes):
            results[arm.name] = arm_result
            if trajectory is not None:
                trajectories[arm.name] = trajectory
            logger.info(f"Finished arm {arm.name}")

    return [results[a.name] for a in arms], trajectories


def write_summary(arms: List[ArmResult], path: Path) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SUMMARY_HEADER)
    for arm in arms:
        flags = ";".join(f"{k}={_flag_text(v)}" for k, v in sorted(arm.flags.items()))
        if arm.result is None:
            writer.writerow([arm.name, "", "", 0, flags])
            continue
        writer.writerow(
            [
                arm.name,
                _fmt(arm.result.final_val_acc),
                "true" if arm.result.diverged else "false",
                len(arm.result.epochs),
                flags,
            ]
        )
    write_file_atomic(path, buffer.getvalue())
    return path


def _flag_text(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _fmt(value)
    return str(value)


# -- experiments ----------------------------------------------------------


def _wd_equivalence(config: ExperimentConfig) -> List[Arm]:
    base = _with_decay_events(config)
    lam = base.optimizer.weight_decay or DEFAULT_WEIGHT_DECAY
    return [
        Arm("wd_on", _update(base, optimizer={"weight_decay": lam, "mode": "plain", "trajectory": None})),
        Arm("wd_off", _update(base, optimizer={"weight_decay": 0.0, "mode": "plain", "trajectory": None})),
        Arm(
            "wd_off_correction",
            _update(base, optimizer={"weight_decay": 0.0, "mode": "lr-correction", "trajectory": None}),
            reference_arm="wd_on",
        ),
        Arm(
            "norm_schedule",
            _update(base, optimizer={"weight_decay": 0.0, "mode": "norm-schedule", "trajectory": None}),
            reference_arm="wd_on",
        ),
    ]


def _norm_schedule(config: ExperimentConfig) -> List[Arm]:
    base = _with_decay_events(config)
    return [
        Arm("lr_schedule", _update(base, optimizer={"weight_decay": 0.0, "mode": "plain", "trajectory": None})),
        Arm(
            "norm_schedule",
            _update(base, optimizer={"weight_decay": 0.0, "mode": "norm-schedule", "trajectory": None}),
        ),
    ]


def _half_precision(config: ExperimentConfig) -> List[Arm]:
    scale = config.data.scale if config.data.scale != 1.0 else HALF_PRECISION_SCALE
    arms = []
    for metric in ("l2", "l1"):
        for precision in (HALF, F32):
            cfg = _with_norms(_update(config, data={"scale": scale}, precision=precision.label), metric=metric, k=None)
            arms.append(Arm(f"{metric}_{precision.label}", cfg))
    return arms


def _lp_compare(config: ExperimentConfig) -> List[Arm]:
    k = min(DEFAULT_TOPK, config.batch_size)
    return [
        Arm("l2", _with_norms(config, metric="l2", k=None)),
        Arm("l1", _with_norms(config, metric="l1", k=None)),
        Arm("linf", _with_norms(config, metric="linf", k=None)),
        Arm(f"top{k}", _with_norms(config, metric="topk", k=k)),
    ]


def _constant_importance(config: ExperimentConfig) -> List[Arm]:
    return [
        Arm("l1_no_constant", _with_norms(config, metric="l1", k=None, constant_scale=1.0 / c_l1())),
        Arm("l1_constant_080", _with_norms(config, metric="l1", k=None, constant_scale=0.8)),
        Arm("l1_constant_100", _with_norms(config, metric="l1", k=None, constant_scale=1.0)),
        Arm("l1_constant_120", _with_norms(config, metric="l1", k=None, constant_scale=1.2)),
    ]


def _bwn_invariance(config: ExperimentConfig) -> List[Arm]:
    layers = []
    for layer in config.model.layers:
        dumped = layer.model_dump()
        dumped["weight_mode"] = "bwn"
        if layer.norm is not None:
            dumped["norm"]["mean_only"] = True
        layers.append(dumped)
    return [Arm("bwn", _update(config, model={"layers": layers}))]


def _with_weight_mode(config: ExperimentConfig, mode: str, p: float = 2.0, **norm_updates) -> ExperimentConfig:
    """Every hidden layer in weight mode `mode`, followed by a normalization updated with norm_updates."""
    layers = []
    for layer in config.model.layers:
        dumped = layer.model_dump()
        dumped["weight_mode"] = mode
        dumped["weight_p"] = p
        dumped["norm"] = {**(dumped["norm"] or {}), **norm_updates}
        layers.append(dumped)
    return _update(config, model={"layers": layers})


def _weight_norm_compare(config: ExperimentConfig) -> List[Arm]:
    mean_only = {"metric": "l2", "k": None, "mean_only": True}
    return [
        Arm("bn", _with_weight_mode(config, "plain", metric="l2", k=None, mean_only=False)),
        Arm("wn", _with_weight_mode(config, "wn", **mean_only)),
        Arm("bwn_l2", _with_weight_mode(config, "bwn", 2.0, **mean_only)),
        Arm("bwn_l1", _with_weight_mode(config, "bwn", 1.0, **mean_only)),
        Arm("bwn_linf", _with_weight_mode(config, "bwn", math.inf, **mean_only)),
    ]


def _bwn_checks(arm: ArmResult, trainer: Trainer, config: ExperimentConfig, diagnostics: List[Diagnostic]) -> None:
    """Norm invariant over the logged trajectory and function preservation of rho folding."""
    model, recorder = trainer.model, trainer.recorder
    rhos = {
        i: layer.bounded.rho
        for i, layer in model.weight_layers()
        if layer.bounded is not None and layer.bounded.mode.value == "bwn" and layer.bounded.p == 2.0
    }
    worst = 0.0
    for record in recorder.store.records():
        if record.layer in rhos:
            worst = max(worst, abs(record.norm - rhos[record.layer]) / rhos[record.layer])
    arm.flags["norm_max_rel_error"] = worst
    arm.flags["norm_invariant"] = worst <= BWN_NORM_RTOL

    try:
        folded = fold_rho_into_classifier(model)
    except NormlabError as e:
        diagnostics.append(Diagnostic(stage="experiment", severity="error", arm=arm.name, message=str(e)))
        return
    shape = (100,) + tuple(model.input_shape)
    x = Tensor(Rng(config.seed).normal(shape), model.precision)
    before = model.forward(x, StatsMode.EVAL).array
    after = folded.forward(x, StatsMode.EVAL).array
    rel = float(np.max(np.abs(after - before)) / max(np.max(np.abs(before)), 1e-300))
    arm.flags["fold_max_rel_error"] = rel
    arm.flags["fold_preserves_outputs"] = rel <= FOLD_RTOL


def _constants(config: ExperimentConfig, out_dir: Path) -> ExperimentResult:
    queries = [
        ConstantQuery(Scheme.L1, 16),
        ConstantQuery(Scheme.L1, 256),
        ConstantQuery(Scheme.LINF, 16),
        ConstantQuery(Scheme.LINF, 256),
        ConstantQuery(Scheme.TOPK, 64, DEFAULT_TOPK),
    ]
    rng = Rng(config.seed)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CONSTANTS_CSV_HEADER)
    arms = []
    for query in queries:
        estimate = mc_dispersion_ratio(query, config.mc_trials, rng)
        writer.writerow(
            [
                query.scheme.value,
                query.n,
                "" if query.k is None else query.k,
                _fmt(query.closed_form),
                _fmt(estimate.value),
                _fmt(estimate.stderr),
            ]
        )
        name = f"{query.scheme.value}_n{query.n}" + (f"_k{query.k}" if query.k else "")
        flags: Dict[str, object] = {"mc_value": estimate.value, "mc_stderr": estimate.stderr}
        if query.scheme is Scheme.LINF:
            low, high = LINF_CORRIDOR
            flags["within_bounds"] = low <= estimate.value <= high
        arms.append(ArmResult(name=name, flags=flags))
    path = out_dir / "constants.csv"
    write_file_atomic(path, buffer.getvalue())
    return ExperimentResult(name="constants", arms=arms, files=[path])


def _claim(config: ExperimentConfig, out_dir: Path) -> ExperimentResult:
    objective, w0 = claim_problem(config.seed)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("eta", "residual", "residual_half_eta", "ratio", "effective_step", "measured_step"))
    arms = []
    for eta in (1e-2, 1e-3, 1e-4):
        report = verify_direction_claim(objective, w0, eta)
        writer.writerow(
            [
                repr(eta),
                f"{report.residual:.6e}",
                f"{report.residual_half_eta:.6e}",
                _fmt(report.ratio_at_half_eta),
                f"{report.effective_step:.6e}",
                f"{report.measured_step:.6e}",
            ]
        )
        arms.append(ArmResult(name=f"eta_{eta:g}", flags={"ratio": report.ratio_at_half_eta}))
    path = out_dir / "claim.csv"
    write_file_atomic(path, buffer.getvalue())
    return ExperimentResult(name="claim", arms=arms, files=[path])


_TRAINING_EXPERIMENTS: Dict[str, Callable[[ExperimentConfig], List[Arm]]] = {
    "wd-equivalence": _wd_equivalence,
    "norm-schedule": _norm_schedule,
    "half-precision": _half_precision,
    "lp-compare": _lp_compare,
    "constant-importance": _constant_importance,
    "bwn-invariance": _bwn_invariance,
    "weight-norm-compare": _weight_norm_compare,
}


def _annotate(name: str, arms: List[ArmResult]) -> None:
    """Experiment-specific comparisons between arms."""
    by_name = {a.name: a for a in arms}

    def acc(arm_name: str) -> Optional[float]:
        arm = by_name.get(arm_name)
        return arm.result.final_val_acc if arm and arm.result and not arm.result.diverged else None

    if name == "wd-equivalence":
        ref = acc("wd_on")
        for other in ("wd_off_correction", "norm_schedule"):
            if ref is not None and acc(other) is not None:
                gap = abs(acc(other) - ref)
                by_name[other].flags["gap_to_wd_on"] = gap
                by_name[other].flags["matches_wd_on"] = gap <= ACCURACY_TOLERANCE
    elif name == "half-precision":
        for metric in ("l2", "l1"):
            half, twin = by_name.get(f"{metric}_half"), acc(f"{metric}_f32")
            if half is None:
                continue
            half_acc = acc(f"{metric}_half")
            degraded = half_acc is None or (twin is not None and half_acc < twin - ACCURACY_TOLERANCE)
            half.flags["degraded"] = degraded
    elif name == "lp-compare":
        ref = acc("l2")
        for arm in arms:
            if arm.name != "l2" and ref is not None and acc(arm.name) is not None:
                arm.flags["gap_to_l2"] = abs(acc(arm.name) - ref)
    elif name == "weight-norm-compare":
        ref = acc("bn")
        for arm in arms:
            if arm.name != "bn" and ref is not None and acc(arm.name) is not None:
                arm.flags["gap_to_bn"] = abs(acc(arm.name) - ref)


def run_experiment(name: str, config: ExperimentConfig, out_dir: Path, workers: int = 1) -> ExperimentResult:
    """Run experiment `name` and write its CSV files into out_dir.

    Raises:
        ValueError: unknown experiment name
    """
    if name not in EXPERIMENTS:
        raise ValueError(f"Unknown experiment '{name}'. Expected one of: {', '.join(EXPERIMENTS)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running experiment {name} into {out_dir}")

    if name == "constants":
        result = _constants(config, out_dir)
    elif name == "claim":
        result = _claim(config, out_dir)
    else:
        result = _run_training_experiment(name, config, out_dir, workers)

    summary = write_summary(result.arms, out_dir / "summary.csv")
    result.files.append(summary)
    return result


def _run_training_experiment(name: str, config: ExperimentConfig, out_dir: Path, workers: int) -> ExperimentResult:
    diagnostics: List[Diagnostic] = []
    if _normalized_layer_count(config) == 0 and name not in ("bwn-invariance", "weight-norm-compare"):
        diagnostics.append(
            Diagnostic(
                stage="experiment",
                severity="warning",
                message="model has no normalized layers; arms differ only in name",
                suggestion="Add a norm to at least one hidden layer",
            )
        )
    arms = _TRAINING_EXPERIMENTS[name](config)

    if name == "bwn-invariance":
        # the trained model itself is inspected, so this arm stays in-process
        arm_result, trainer = _train_arm(arms[0], out_dir)
        if trainer is not None:
            _bwn_checks(arm_result, trainer, config, diagnostics)
        results = [arm_result]
        trajectories: Dict[str, Path] = {}
    else:
        results, trajectories = run_arms(arms, out_dir, workers)

    files = [a.csv_path for a in results if a.csv_path is not None]
    files.extend(trajectories[a.name] for a in results if a.name in trajectories)

    _annotate(name, results)
    return ExperimentResult(name=name, arms=results, files=files, diagnostics=diagnostics)


__all__ = [
    "EXPERIMENTS",
    "Arm",
    "run_arms",
    "write_summary",
    "run_experiment",
]
