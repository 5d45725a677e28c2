"""Minibatch training loop and per-run CSV output."""

from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from normlab.core.rng import Rng
from normlab.core.tensor import Tensor
from normlab.norms.activation import StatsMode
from normlab.schema.experiment import ExperimentConfig
from normlab.schema.results import DivergenceInfo, EpochMetrics, LayerNormSummary, RunResult
from normlab.train.data import load_from_config
from normlab.train.dynamics import Optimizer
from normlab.train.model import ActivationNorm, Network, accuracy, build_model, softmax_cross_entropy
from normlab.train.trajectory import TrajectoryRecorder, TrajectoryStore
from normlab.utils.constants import CSV_DECIMALS, RUN_CSV_HEADER
from normlab.utils.fileio import write_bytes_atomic, write_file_atomic
from normlab.utils.validation import validate_loss

logger = logging.getLogger(__name__)


class Trainer:
    """One training run: data, model, optimizer and the norm trajectory.

    Runs are deterministic in (config, seed): initial weights, the split and
    the per-epoch batch order all derive from `config.seed`.
    """

    def __init__(
        self,
        config: ExperimentConfig,
        reference: Optional[TrajectoryStore] = None,
        model: Optional[Network] = None,
    ) -> None:
        self.config = config
        self.precision = config.precision_mode
        num_classes = config.model.num_classes
        self.train_set, self.val_set = load_from_config(config.data, config.seed, num_classes)

        spec = config.model
        if spec.input_shape is None:
            spec = spec.with_input_shape(self.train_set.sample_shape)
        self.model = model.copy() if model is not None else build_model(spec, config.seed, self.precision)

        if reference is None and config.optimizer.trajectory is not None:
            reference = TrajectoryStore.read(config.optimizer.trajectory)
        self.reference = reference

        self.batch_size = min(config.batch_size, len(self.train_set))
        self.steps_per_epoch = max(len(self.train_set) // self.batch_size, 1)
        self.optimizer = Optimizer(config.optimizer, self.model, reference, self.steps_per_epoch)
        self.recorder = TrajectoryRecorder()
        self._shuffle = Rng(config.seed).spawn(2)[1]

        self._train_x = Tensor(self.train_set.features, self.precision)
        self._val_x = Tensor(self.val_set.features, self.precision)

    def _record_norms(self, step: int) -> None:
        for index, layer in self.model.tracked_layers():
            self.recorder.record(step, index, layer.channel_norms())

    def _non_finite_state(self) -> Optional[str]:
        """First non-finite dispersion or gradient left by the last backward pass."""
        for index, layer in enumerate(self.model.layers):
            if isinstance(layer, ActivationNorm):
                dispersion = layer.last_dispersion
                if dispersion is not None and not np.all(np.isfinite(dispersion.array)):
                    return f"dispersion in layer {index}"
            for name, grad in layer.gradients().items():
                if not np.all(np.isfinite(grad.array)):
                    return f"gradient {index}.{name}"
        return None

    def _non_finite_parameters(self) -> Optional[str]:
        for index, name, value in self.model.parameters():
            if not np.all(np.isfinite(value.array)):
                return f"parameter {index}.{name}"
        for index, layer in self.model.tracked_layers():
            if not np.all(np.isfinite(layer.channel_norms())):
                return f"weight norm of layer {index}"
        return None

    def _restore(self, parameters: List[Tuple[int, str, Tensor]]) -> None:
        for index, name, value in parameters:
            self.model.layers[index].set_parameter(name, value)

    def _norm_summaries(self, epoch: int) -> List[LayerNormSummary]:
        summaries = []
        for index, layer in self.model.tracked_layers():
            norms = layer.channel_norms()
            summaries.append(
                LayerNormSummary(
                    epoch=epoch,
                    layer=index,
                    mean_norm=float(np.mean(norms)),
                    min_norm=float(np.min(norms)),
                    max_norm=float(np.max(norms)),
                )
            )
        return summaries

    def evaluate(self) -> float:
        return accuracy(self.model, self._val_x, self.val_set.labels)

    def run(self) -> RunResult:
        """Train for config.epochs epochs.

        A NaN/inf loss, dispersion, gradient or updated weight ends the run:
        the offending update is not applied, the partial epoch is reported
        with diverged=True and no further epochs run.
        """
        result = RunResult(initial_val_acc=self.evaluate())
        logger.info(
            f"Training {self.config.epochs} epochs x {self.steps_per_epoch} steps "
            f"(batch {self.batch_size}, {self.precision.label}); initial val acc {result.initial_val_acc:.4f}"
        )

        step = 0
        for epoch in range(1, self.config.epochs + 1):
            order = self._shuffle.permutation(len(self.train_set))
            losses: List[float] = []
            diverged = False
            for b in range(self.steps_per_epoch):
                idx = order[b * self.batch_size : (b + 1) * self.batch_size]
                self._record_norms(step)
                logits = self.model.forward(self._train_x.take(idx), StatsMode.TRAIN)
                loss, grad = softmax_cross_entropy(logits, self.train_set.labels[idx])
                losses.append(loss)

                ok, error = validate_loss(loss)
                if not ok:
                    logger.warning(f"Diverged at epoch {epoch}, step {step}: {error}")
                    result.divergence = DivergenceInfo(epoch=epoch, step=step)
                    diverged = True
                    break

                self.model.backward(grad)
                problem = self._non_finite_state()
                if problem is None:
                    previous = self.model.parameters()
                    self.optimizer.step(self.model, step)
                    problem = self._non_finite_parameters()
                    if problem is not None:
                        self._restore(previous)
                if problem is not None:
                    logger.warning(f"Diverged at epoch {epoch}, step {step}: non-finite {problem}")
                    result.divergence = DivergenceInfo(epoch=epoch, step=step)
                    diverged = True
                    break
                step += 1

            summaries = self._norm_summaries(epoch)
            all_norms = np.concatenate([layer.channel_norms() for _, layer in self.model.tracked_layers()])
            metrics = EpochMetrics(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_acc=self.evaluate(),
                mean_norm=float(np.mean(all_norms)),
                max_norm=float(np.max(all_norms)),
                diverged=diverged,
            )
            result.epochs.append(metrics)
            result.layer_norms.extend(summaries)
            logger.info(
                f"epoch {epoch}: loss={metrics.train_loss:.4f} val_acc={metrics.val_acc:.4f} "
                f"norm mean={metrics.mean_norm:.4f} max={metrics.max_norm:.4f}"
            )
            if diverged:
                result.diverged = True
                return result

        self._record_norms(step)
        return result

    def save_parameters(self, path: Path) -> Path:
        """Dump final parameters as .npz (keys '<layer>.<name>')."""
        buffer = io.BytesIO()
        np.savez(buffer, **self.model.state_arrays())
        path = Path(path)
        write_bytes_atomic(path, buffer.getvalue())
        logger.info(f"Saved parameters to {path}")
        return path


def train(config: ExperimentConfig, reference: Optional[TrajectoryStore] = None) -> RunResult:
    """Run one training job described by `config`."""
    return Trainer(config, reference).run()


def _fmt(value: float) -> str:
    return f"{value:.{CSV_DECIMALS}f}"


def run_csv(result: RunResult) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(RUN_CSV_HEADER)
    for m in result.epochs:
        writer.writerow(
            [
                m.epoch,
                _fmt(m.train_loss),
                _fmt(m.val_acc),
                _fmt(m.mean_norm),
                _fmt(m.max_norm),
                "true" if m.diverged else "false",
            ]
        )
    return buffer.getvalue()


def emit_csv(result: RunResult, path: Path) -> Path:
    """Write the per-epoch table of `result` (header only for an empty run).

    Raises:
        OSError: the file cannot be written
    """
    path = Path(path)
    write_file_atomic(path, run_csv(result))
    logger.debug(f"Wrote {len(result.epochs)} epoch rows to {path}")
    return path


def read_run_csv(path: Path) -> List[EpochMetrics]:
    """Reload a file written by emit_csv."""
    with Path(path).open(encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RUN_CSV_HEADER:
            raise ValueError(f"unexpected run CSV header {reader.fieldnames}")
        return [
            EpochMetrics(
                epoch=int(row["epoch"]),
                train_loss=float(row["train_loss"]),
                val_acc=float(row["val_acc"]),
                mean_norm=float(row["mean_norm"]),
                max_norm=float(row["max_norm"]),
                diverged=row["diverged"] == "true",
            )
            for row in reader
        ]


__all__ = ["Trainer", "train", "run_csv", "emit_csv", "read_run_csv"]
