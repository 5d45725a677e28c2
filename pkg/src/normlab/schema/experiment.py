from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from normlab.core.precision import PrecisionMode
from normlab.utils.constants import DEFAULT_EPSILON, DEFAULT_SEED, LR_DECAY_FACTOR, MC_DEFAULT_TRIALS

Metric = Literal["l2", "l1", "linf", "topk"]
WeightMode = Literal["plain", "wn", "bwn"]
OptimizerMode = Literal["plain", "lr-correction", "norm-schedule"]

BATCH_AXIS = 0
FEATURE_AXIS = 1


class NormScheme(BaseModel):
    """
    Configuration of an activation-normalization layer.
    axis 0 reduces over the batch (batch norm), axis 1 over features (layer norm).
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    metric: Metric = Field("l2", description="Dispersion metric")
    k: Optional[int] = Field(None, ge=1, description="Top(k) count, required for metric 'topk'")
    axis: int = Field(BATCH_AXIS, description="Reduction axis of a (batch, features) input")
    epsilon: float = Field(DEFAULT_EPSILON, gt=0, description="Added to the constant-scaled dispersion")
    affine: bool = Field(True, description="Learnable per-feature scale and shift")
    mean_only: bool = Field(False, description="Subtract the mean without dividing by the dispersion")
    constant_scale: float = Field(1.0, gt=0, description="Multiplier on the scheme constant")

    @field_validator("axis")
    @classmethod
    def _known_axis(cls, axis: int) -> int:
        if axis not in (BATCH_AXIS, FEATURE_AXIS):
            raise ValueError(f"axis must be 0 or 1, got {axis}")
        return axis

    @model_validator(mode="after")
    def _topk_needs_k(self) -> "NormScheme":
        if self.metric == "topk" and self.k is None:
            raise ValueError("metric 'topk' requires k")
        return self

    @classmethod
    def batch_norm(cls, metric: Metric = "l2", **kwargs) -> "NormScheme":
        return cls(metric=metric, axis=BATCH_AXIS, **kwargs)

    @classmethod
    def layer_norm(cls, metric: Metric = "l2", **kwargs) -> "NormScheme":
        return cls(metric=metric, axis=FEATURE_AXIS, **kwargs)


class LayerSpec(BaseModel):
    """A hidden linear or convolution layer, optionally followed by normalization."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["linear", "conv"] = "linear"
    out_features: int = Field(..., gt=0, description="Output units (channels for conv)")
    kernel_size: int = Field(3, gt=0, description="Square kernel, conv only")
    norm: Optional[NormScheme] = Field(None, description="Normalization after the layer")
    weight_mode: WeightMode = Field("plain", description="Weight parameterization")
    weight_p: float = Field(2.0, description="Norm order for bounded weight norm: 1, 2 or inf")

    @field_validator("weight_p")
    @classmethod
    def _check_p(cls, value: float) -> float:
        if value not in (1.0, 2.0, float("inf")):
            raise ValueError(f"weight_p must be 1, 2 or inf, got {value}")
        return value


class ModelSpec(BaseModel):
    """Layer list plus a single linear classifier head."""

    model_config = ConfigDict(extra="forbid")

    input_shape: Optional[Tuple[int, ...]] = Field(None, description="(features,) or (channels, height, width)")
    layers: List[LayerSpec] = Field(default_factory=list)
    activation: Literal["relu", "identity", "tanh"] = "relu"
    num_classes: int = Field(2, ge=2)
    classifier_mode: Literal["plain", "bwn"] = "plain"
    classifier_p: float = 2.0

    def with_input_shape(self, shape: Tuple[int, ...]) -> "ModelSpec":
        return self.model_copy(update={"input_shape": tuple(shape)})


class ScheduleEvent(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    step: int = Field(..., ge=0)
    multiplier: float = Field(..., gt=0)


class OptimizerConfig(BaseModel):
    """SGD with weight decay, learning-rate events and the correction modes."""

    model_config = ConfigDict(extra="forbid")

    eta: float = Field(0.1, gt=0, description="Learning rate")
    weight_decay: float = Field(0.0, ge=0, description="L2 penalty coefficient lambda")
    schedule: List[ScheduleEvent] = Field(default_factory=list, description="(step, multiplier) events")
    decay_every: Optional[int] = Field(None, gt=0, description="Epochs between decay events")
    decay_factor: float = Field(LR_DECAY_FACTOR, gt=0)
    mode: OptimizerMode = "plain"
    last_layer_only: bool = Field(False, description="Apply weight decay to the classifier only")
    trajectory: Optional[Path] = Field(None, description="Reference trajectory CSV for replay modes")
    project_after_step: bool = Field(False, description="Project bounded weights back onto their norm ball after each step")

    @field_validator("schedule")
    @classmethod
    def _increasing(cls, events: List[ScheduleEvent]) -> List[ScheduleEvent]:
        steps = [e.step for e in events]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("schedule steps must be strictly increasing")
        return events


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format: Literal["synthetic", "csv", "idx"] = "synthetic"
    path: Optional[Path] = None
    labels_path: Optional[Path] = None
    split: float = Field(0.8, gt=0, lt=1, description="Training fraction")
    samples: int = Field(2048, ge=4, description="Synthetic set size")
    features: int = Field(16, ge=1, description="Synthetic feature count")
    classes: int = Field(2, ge=2)
    separation: float = Field(1.0, gt=0, description="Synthetic class-mean distance in noise units")
    scale: float = Field(1.0, gt=0, description="Multiplier applied to all inputs")
    image_side: Optional[int] = Field(None, gt=0, description="Reshape synthetic features to side x side images")

    @model_validator(mode="after")
    def _path_for_files(self) -> "DataConfig":
        if self.format != "synthetic" and self.path is None:
            raise ValueError(f"data format '{self.format}' requires a path")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelSpec
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    batch_size: int = Field(64, ge=2, description="Normalization needs at least two samples")
    epochs: int = Field(20, ge=0)
    precision: str = Field("f64", description="f64 | f32 | half | half-wide")
    seed: int = Field(DEFAULT_SEED, ge=0)
    mc_trials: int = Field(MC_DEFAULT_TRIALS, ge=1000)

    @field_validator("precision")
    @classmethod
    def _known_precision(cls, value: str) -> str:
        return PrecisionMode.parse(value).label

    @property
    def precision_mode(self) -> PrecisionMode:
        return PrecisionMode.parse(self.precision)


__all__ = [
    "Metric",
    "WeightMode",
    "OptimizerMode",
    "BATCH_AXIS",
    "FEATURE_AXIS",
    "NormScheme",
    "LayerSpec",
    "ModelSpec",
    "ScheduleEvent",
    "OptimizerConfig",
    "DataConfig",
    "ExperimentConfig",
]
