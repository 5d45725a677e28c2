from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from normlab.errors import Diverged


class Diagnostic(BaseModel):
    """
    Structured diagnostic message for errors, warnings, and info.
    Used to surface per-arm problems from experiments without aborting other arms.
    """

    stage: Literal["data", "model", "train", "experiment", "constants"] = Field(
        ..., description="Stage where diagnostic was generated"
    )
    severity: Literal["error", "warning", "info"] = Field(..., description="Severity level")
    arm: Optional[str] = Field(None, description="Experiment arm if applicable (e.g., 'wd_on')")
    message: str = Field(..., description="Human-readable diagnostic message")
    suggestion: Optional[str] = Field(None, description="Suggested fix or next step")


class TrajectoryRecord(BaseModel):
    """Norm of one output channel of one normalized layer, taken before the update at `step`."""

    model_config = ConfigDict(frozen=True)

    step: int = Field(..., ge=0)
    layer: int = Field(..., ge=0)
    channel: int = Field(..., ge=0)
    norm: float = Field(..., gt=0)


class EpochMetrics(BaseModel):
    epoch: int = Field(..., ge=1)
    train_loss: float
    val_acc: float = Field(..., ge=0.0, le=1.0)
    mean_norm: float
    max_norm: float
    diverged: bool = False


class LayerNormSummary(BaseModel):
    epoch: int
    layer: int
    mean_norm: float
    min_norm: float
    max_norm: float


class DivergenceInfo(BaseModel):
    epoch: int
    step: int


class RunResult(BaseModel):
    """Outcome of one training run."""

    initial_val_acc: float = Field(..., ge=0.0, le=1.0)
    epochs: List[EpochMetrics] = Field(default_factory=list)
    layer_norms: List[LayerNormSummary] = Field(default_factory=list)
    diverged: bool = False
    divergence: Optional[DivergenceInfo] = None

    @property
    def final_val_acc(self) -> float:
        """Validation accuracy after the last completed epoch (initial accuracy if none)."""
        completed = [e for e in self.epochs if not e.diverged]
        return completed[-1].val_acc if completed else self.initial_val_acc

    def raise_for_divergence(self) -> None:
        if self.diverged:
            info = self.divergence or DivergenceInfo(epoch=0, step=0)
            raise Diverged(info.epoch, info.step)


class ArmResult(BaseModel):
    name: str
    result: Optional[RunResult] = None
    csv_path: Optional[Path] = None
    flags: dict = Field(default_factory=dict, description="Arm-specific findings (e.g. norm growth)")
    diagnostics: List[Diagnostic] = Field(default_factory=list)


class ExperimentResult(BaseModel):
    name: str
    arms: List[ArmResult] = Field(default_factory=list)
    files: List[Path] = Field(default_factory=list)
    diagnostics: List[Diagnostic] = Field(default_factory=list)

    def has_errors(self) -> bool:
        """Check if any diagnostics are errors"""
        every = self.diagnostics + [d for arm in self.arms for d in arm.diagnostics]
        return any(d.severity == "error" for d in every)

    def arm(self, name: str) -> ArmResult:
        for arm in self.arms:
            if arm.name == name:
                return arm
        raise KeyError(name)


class ClaimReport(BaseModel):
    """Numeric check of the first-order weight-direction update."""

    eta: float
    residual: float = Field(..., ge=0)
    residual_half_eta: float = Field(..., ge=0)
    ratio_at_half_eta: float
    orthogonality: float = Field(..., description="|w_hat . claimed step|")
    gradient_scaling_error: float = Field(..., description="rel. error of grad(2w) vs grad(w)/2")
    radial_gradient: float = Field(..., description="|w . grad L(w)| / (|w| |grad L(w)|)")
    measured_step: float = Field(..., ge=0, description="|w_hat_1 - w_hat_0| / |grad L(w_hat_0)|")
    effective_step: float = Field(..., ge=0, description="eta / |w_0|^2")


class NormGrowthReport(BaseModel):
    """Summary of per-channel norm trajectories of one run."""

    channels: int = Field(..., ge=0)
    growing_fraction: float = Field(..., ge=0.0, le=1.0, description="Channels whose final norm exceeds the initial one")
    growth: bool = Field(..., description="growing_fraction reached the growth threshold")
    trailing_ratio: float = Field(..., description="Largest max/min norm ratio over the trailing window")
    bounded: bool = Field(..., description="trailing_ratio below the bounded threshold")
    decreasing: bool = Field(..., description="Every channel norm strictly decreased at every step")


__all__ = [
    "Diagnostic",
    "TrajectoryRecord",
    "EpochMetrics",
    "LayerNormSummary",
    "DivergenceInfo",
    "RunResult",
    "ArmResult",
    "ExperimentResult",
    "ClaimReport",
    "NormGrowthReport",
]
