"""Small MLP/CNN models with pluggable activation and weight normalization.

Layers run a forward pass in Train or Eval mode and, after a Train forward,
a backward pass that stores parameter gradients. Weights are laid out with
output channels first: linear (out, in), convolution (out, in, k, k).
"""

from __future__ import annotations

import copy
import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from normlab.core.precision import F64, PrecisionMode
from normlab.core.rng import Rng
from normlab.core.tensor import Tensor
from normlab.errors import NonHomogeneousActivation, ShapeChainError
from normlab.norms.activation import AffineParams, NormStats, StatsMode, norm_backward, norm_forward
from normlab.norms.weight import BoundedWeight, WeightNormMode
from normlab.schema.experiment import LayerSpec, ModelSpec, NormScheme

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


class Layer:
    """Base layer: stateless pass-through with no parameters."""

    def forward(self, x: Tensor, mode: StatsMode) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, shape: Shape) -> Shape:
        return shape

    def parameters(self) -> Dict[str, Tensor]:
        return {}

    def gradients(self) -> Dict[str, Tensor]:
        return {}

    def set_parameter(self, name: str, value: Tensor) -> None:
        raise KeyError(f"{type(self).__name__} has no parameter '{name}'")

    def fold_rho(self, scale: float) -> Tuple["Layer", float]:
        """Rewrite for an input shrunk by `scale`; returns (layer, output shrink factor)."""
        return self, scale


class _WeightLayer(Layer):
    """Shared parameter handling for Linear and Conv2d."""

    def __init__(self, weight: Optional[Tensor], bias: Tensor, bounded: Optional[BoundedWeight] = None) -> None:
        if weight is None and bounded is None:
            raise ValueError("a weight layer needs a weight or a bounded parameterization")
        self.weight = weight
        self.bias = bias
        self.bounded = bounded
        self._grads: Dict[str, Tensor] = {}
        self._input: Optional[Tensor] = None
        self._used_weight: Optional[Tensor] = None

    @property
    def out_channels(self) -> int:
        return self.effective_weight.shape[0]

    @property
    def effective_weight(self) -> Tensor:
        return self.bounded.effective() if self.bounded is not None else self.weight

    @property
    def precision(self) -> PrecisionMode:
        return self.bias.precision

    def channel_norms(self) -> np.ndarray:
        """L2 norm of each output channel of the effective weight, in float64."""
        w = self.effective_weight.array.reshape(self.out_channels, -1)
        return np.sqrt(np.sum(w * w, axis=1))

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        if self.bounded is None:
            params["weight"] = self.weight
        else:
            params["v"] = self.bounded.v
            if self.bounded.mode is WeightNormMode.WN:
                params["g"] = self.bounded.g
        params["bias"] = self.bias
        return params

    def gradients(self) -> Dict[str, Tensor]:
        return dict(self._grads)

    def set_parameter(self, name: str, value: Tensor) -> None:
        if name == "bias":
            self.bias = value
        elif name == "weight" and self.bounded is None:
            self.weight = value
        elif name == "v" and self.bounded is not None:
            self.bounded = self.bounded.with_params(value)
        elif name == "g" and self.bounded is not None and self.bounded.mode is WeightNormMode.WN:
            self.bounded = self.bounded.with_params(self.bounded.v, g=value)
        else:
            super().set_parameter(name, value)

    def _store_gradients(self, grad_w: Tensor, grad_b: Tensor) -> None:
        if self.bounded is None:
            self._grads = {"weight": grad_w, "bias": grad_b}
            return
        grad_v, grad_g = self.bounded.backward(grad_w)
        self._grads = {"v": grad_v, "bias": grad_b}
        if grad_g is not None:
            self._grads["g"] = grad_g

    def fold_rho(self, scale: float) -> Tuple["Layer", float]:
        folded = copy.copy(self)
        folded._grads = {}
        rho = 1.0
        if self.bounded is not None and self.bounded.mode is WeightNormMode.BWN:
            rho = self.bounded.rho
            folded.bounded = self.bounded.with_rho(1.0)
        scale = scale * rho
        folded.bias = self.bias / scale
        return folded, scale

    def absorb_scale(self, scale: float) -> "_WeightLayer":
        """Plain layer computing this layer's function of an input shrunk by `scale`."""
        folded = copy.copy(self)
        folded._grads = {}
        folded.weight = self.effective_weight * scale
        folded.bounded = None
        return folded


class Linear(_WeightLayer):
    """y = x W^T + b for x of shape (batch, in)."""

    def forward(self, x: Tensor, mode: StatsMode) -> Tensor:
        w = self.effective_weight
        self._input, self._used_weight = x, w
        return x @ w.T + self.bias

    def backward(self, grad: Tensor) -> Tensor:
        x, w = self._input, self._used_weight
        self._store_gradients(grad.T @ x, grad.sum(0))
        return grad @ w

    def output_shape(self, shape: Shape) -> Shape:
        if len(shape) != 1 or shape[0] != self.effective_weight.shape[1]:
            raise ShapeChainError(f"linear layer expects ({self.effective_weight.shape[1]},) inputs, got {shape}")
        return (self.out_channels,)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C*k*k) patches for a stride-1 'same' convolution."""
    n, c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    patches = np.empty((n, c, k, k, h, w))
    for i in range(k):
        for j in range(k):
            patches[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return patches.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * w, c * k * k)


def _col2im(cols: np.ndarray, shape: Shape, k: int, precision: PrecisionMode) -> np.ndarray:
    """Adjoint of _im2col; overlapping contributions are added one kernel offset at a time."""
    n, c, h, w = shape
    pad = k // 2
    patches = cols.reshape(n, h, w, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    with np.errstate(all="ignore"):
        for i in range(k):
            for j in range(k):
                region = out[:, :, i : i + h, j : j + w]
                out[:, :, i : i + h, j : j + w] = precision.round(region + patches[:, :, i, j])
    return out[:, :, pad : pad + h, pad : pad + w]


class Conv2d(_WeightLayer):
    """Stride-1 convolution with 'same' zero padding on (N, C, H, W) inputs."""

    @property
    def kernel_size(self) -> int:
        return self.effective_weight.shape[2]

    def forward(self, x: Tensor, mode: StatsMode) -> Tensor:
        w = self.effective_weight
        n, _, h, wd = x.shape
        cols = Tensor.from_array(_im2col(x.array, self.kernel_size), x.precision)
        self._input, self._used_weight = cols, w
        self._in_shape = x.shape
        out = cols @ w.reshape(self.out_channels, -1).T + self.bias
        return out.reshape(n, h, wd, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad: Tensor) -> Tensor:
        cols, w = self._input, self._used_weight
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        w_mat = w.reshape(self.out_channels, -1)
        self._store_gradients((g2.T @ cols).reshape(w.shape), g2.sum(0))
        grad_cols = g2 @ w_mat
        return Tensor.from_array(
            _col2im(grad_cols.array, self._in_shape, self.kernel_size, grad.precision), grad.precision
        )

    def output_shape(self, shape: Shape) -> Shape:
        in_channels = self.effective_weight.shape[1]
        if len(shape) != 3 or shape[0] != in_channels:
            raise ShapeChainError(f"conv layer expects ({in_channels}, H, W) inputs, got {shape}")
        return (self.out_channels, shape[1], shape[2])


def _to_rows(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N*H*W, C)."""
    c = x.shape[1]
    return x.transpose(0, 2, 3, 1).reshape(-1, c)


def _from_rows(rows: Tensor, shape: Shape) -> Tensor:
    n, c, h, w = shape
    return rows.reshape(n, h, w, c).transpose(0, 3, 1, 2)


class ActivationNorm(Layer):
    """Stateful normalization layer owning gamma/beta and running statistics.

    Rank-4 activations are normalized per channel over batch x height x width.
    """

    def __init__(
        self,
        scheme: NormScheme,
        features: int,
        precision: PrecisionMode = F64,
        params: Optional[AffineParams] = None,
        stats: Optional[NormStats] = None,
    ) -> None:
        self.scheme = scheme
        self.features = features
        self.params = params or AffineParams.identity(features, precision)
        self.stats = stats or NormStats(
            running_mean=Tensor.zeros((1, features), precision),
            running_dispersion=Tensor.ones((1, features), precision),
        )
        self._cache = None
        self._grads: Dict[str, Tensor] = {}
        self._shape: Optional[Shape] = None

    @property
    def divides(self) -> bool:
        return not self.scheme.mean_only

    @property
    def last_dispersion(self) -> Optional[Tensor]:
        """Batch dispersion of the last Train-mode forward pass (None when mean-only)."""
        return self._cache.dispersion if self._cache is not None else None

    def forward(self, x: Tensor, mode: StatsMode) -> Tensor:
        self._shape = x.shape
        rows = _to_rows(x) if x.rank == 4 else x
        y, cache = norm_forward(rows, self.scheme, self.params, mode, self.stats)
        if StatsMode(mode) is StatsMode.TRAIN:
            self._cache = cache
            self.stats = cache.stats
        return _from_rows(y, x.shape) if x.rank == 4 else y

    def backward(self, grad: Tensor) -> Tensor:
        rows = _to_rows(grad) if grad.rank == 4 else grad
        grad_x, grad_gamma, grad_beta = norm_backward(rows, self._cache, self.scheme)
        self._grads = {} if grad_gamma is None else {"gamma": grad_gamma, "beta": grad_beta}
        return _from_rows(grad_x, grad.shape) if grad.rank == 4 else grad_x

    def output_shape(self, shape: Shape) -> Shape:
        if shape[0] != self.features:
            raise ShapeChainError(f"normalization over {self.features} features got input {shape}")
        return shape

    def parameters(self) -> Dict[str, Tensor]:
        if not self.scheme.affine:
            return {}
        return {"gamma": self.params.gamma, "beta": self.params.beta}

    def gradients(self) -> Dict[str, Tensor]:
        return dict(self._grads)

    def set_parameter(self, name: str, value: Tensor) -> None:
        if name == "gamma" and self.scheme.affine:
            self.params = AffineParams(value, self.params.beta)
        elif name == "beta" and self.scheme.affine:
            self.params = AffineParams(self.params.gamma, value)
        else:
            super().set_parameter(name, value)

    def fold_rho(self, scale: float) -> Tuple[Layer, float]:
        if self.divides:
            raise NonHomogeneousActivation(
                f"{self.scheme.metric} normalization divides by the dispersion; only mean-only normalization folds"
            )
        folded = copy.copy(self)
        folded.params = AffineParams(self.params.gamma, self.params.beta / scale)
        running = self.stats.running_mean
        folded.stats = NormStats(
            mean=None,
            dispersion=None,
            running_mean=running / scale if running is not None else None,
            running_dispersion=self.stats.running_dispersion,
            momentum=self.stats.momentum,
        )
        return folded, scale


class Activation(Layer):
    HOMOGENEOUS = ("relu", "identity")

    def __init__(self, kind: str = "relu") -> None:
        if kind not in ("relu", "identity", "tanh"):
            raise ValueError(f"Unknown activation '{kind}'")
        self.kind = kind
        self._saved: Optional[Tensor] = None

    def forward(self, x: Tensor, mode: StatsMode) -> Tensor:
        if self.kind == "identity":
            return x
        if self.kind == "relu":
            self._saved = x
            return x.relu()
        y = x.tanh()
        self._saved = y
        return y

    def backward(self, grad: Tensor) -> Tensor:
        if self.kind == "identity":
            return grad
        if self.kind == "relu":
            mask = (self._saved.array > 0.0).astype(np.float64)
            return grad * Tensor.from_array(mask, grad.precision)
        return grad * (1.0 - self._saved.square())

    def fold_rho(self, scale: float) -> Tuple[Layer, float]:
        if self.kind not in self.HOMOGENEOUS:
            raise NonHomogeneousActivation(f"activation '{self.kind}' is not positively 1-homogeneous")
        return self, scale


class Flatten(Layer):
    def forward(self, x: Tensor, mode: StatsMode) -> Tensor:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: Tensor) -> Tensor:
        return grad.reshape(self._shape)

    def output_shape(self, shape: Shape) -> Shape:
        return (int(np.prod(shape)),)


class Network:
    """Layer stack ending in a single linear classifier head."""

    def __init__(self, layers: List[Layer], precision: PrecisionMode = F64, input_shape: Optional[Shape] = None):
        if not layers or not isinstance(layers[-1], Linear):
            raise ShapeChainError("a model needs exactly one linear classifier head as its last layer")
        self.layers = layers
        self.precision = precision
        self.input_shape = input_shape

    @property
    def head(self) -> Linear:
        return self.layers[-1]

    def forward(self, x: Tensor, mode: StatsMode = StatsMode.TRAIN) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict(self, x: Tensor) -> np.ndarray:
        logits = self.forward(x, StatsMode.EVAL)
        return np.argmax(logits.array, axis=1)

    def weight_layers(self) -> List[Tuple[int, _WeightLayer]]:
        return [(i, layer) for i, layer in enumerate(self.layers) if isinstance(layer, _WeightLayer)]

    def tracked_layers(self) -> List[Tuple[int, _WeightLayer]]:
        """Hidden weight layers whose norms are logged (the head if there are none)."""
        hidden = self.weight_layers()[:-1]
        return hidden or self.weight_layers()

    def normalized_layers(self) -> List[Tuple[int, _WeightLayer]]:
        """Hidden weight layers directly followed by a dividing normalization (scale-invariant)."""
        found = []
        for i, layer in self.weight_layers()[:-1]:
            following = self.layers[i + 1] if i + 1 < len(self.layers) else None
            if isinstance(following, ActivationNorm) and following.divides:
                found.append((i, layer))
        return found

    def parameters(self) -> List[Tuple[int, str, Tensor]]:
        return [(i, name, value) for i, layer in enumerate(self.layers) for name, value in layer.parameters().items()]

    def with_layers(self, layers: List[Layer]) -> "Network":
        return Network(list(layers), self.precision, self.input_shape)

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Parameter arrays keyed '<layer>.<name>' (for .npz dumps)."""
        return {f"{i}.{name}": value.numpy() for i, name, value in self.parameters()}


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tuple[float, Tensor]:
    """Mean cross-entropy of softmax(logits) and its gradient with respect to the logits."""
    batch = logits.shape[0]
    z = logits - logits.max(1)
    e = z.exp()
    s = e.sum(1)
    log_probs = z - s.log()
    rows = np.arange(batch)
    with np.errstate(all="ignore"):
        loss = -float(np.mean(log_probs.array[rows, labels]))
    onehot = np.zeros(logits.shape)
    onehot[rows, labels] = 1.0
    grad = (e / s - Tensor.from_array(onehot, logits.precision)).scale(1.0 / batch)
    return loss, grad


def accuracy(model: Network, x: Tensor, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return 0.0
    return float(np.mean(model.predict(x) == labels))


def _gaussian_weight(rng: Rng, shape: Sequence[int], fan_in: int, precision: PrecisionMode) -> Tensor:
    return rng.normal_tensor(shape, math.sqrt(2.0 / fan_in), precision)


def _weight_layer(
    spec_kind: str,
    weight_shape: Shape,
    fan_in: int,
    weight_mode: str,
    p: float,
    rng: Rng,
    precision: PrecisionMode,
) -> _WeightLayer:
    V = _gaussian_weight(rng, weight_shape, fan_in, precision)
    bias = Tensor.zeros((1, weight_shape[0]), precision)
    cls = Conv2d if spec_kind == "conv" else Linear
    if weight_mode == "plain":
        return cls(V, bias)
    bounded = BoundedWeight.from_init(V, p=p, mode=WeightNormMode(weight_mode))
    return cls(None, bias, bounded)


def build_model(spec: ModelSpec, seed: int, precision: PrecisionMode = F64) -> Network:
    """Instantiate `spec` with sqrt(2 / fan_in) Gaussian weights.

    Every weight layer draws from its own stream spawned from `seed`, so
    models that differ only in normalization share their initial weights.
    Linear layers following a convolution get an implicit Flatten.

    Raises:
        ShapeChainError: missing input shape or layer shapes that do not chain
    """
    if not spec.input_shape:
        raise ShapeChainError("model input shape is unknown")
    shape: Shape = tuple(spec.input_shape)
    streams = Rng(seed).spawn(len(spec.layers) + 1)
    layers: List[Layer] = []

    def add(layer: Layer) -> None:
        nonlocal shape
        shape = layer.output_shape(shape)
        layers.append(layer)

    for index, layer_spec in enumerate(spec.layers):
        add(_hidden_layer(layer_spec, shape, streams[index], precision, add))
        if layer_spec.norm is not None:
            add(ActivationNorm(layer_spec.norm, layer_spec.out_features, precision))
        add(Activation(spec.activation))

    if len(shape) != 1:
        add(Flatten())
    head_mode = "bwn" if spec.classifier_mode == "bwn" else "plain"
    add(
        _weight_layer(
            "linear",
            (spec.num_classes, shape[0]),
            shape[0],
            head_mode,
            spec.classifier_p,
            streams[-1],
            precision,
        )
    )
    logger.debug(f"Built model with {len(layers)} layers, output shape {shape}")
    return Network(layers, precision, tuple(spec.input_shape))


def _hidden_layer(layer_spec: LayerSpec, shape: Shape, rng: Rng, precision: PrecisionMode, add) -> Layer:
    if layer_spec.kind == "conv":
        if len(shape) != 3:
            raise ShapeChainError(f"conv layer needs (channels, height, width) input, got {shape}")
        k = layer_spec.kernel_size
        return _weight_layer(
            "conv",
            (layer_spec.out_features, shape[0], k, k),
            shape[0] * k * k,
            layer_spec.weight_mode,
            layer_spec.weight_p,
            rng,
            precision,
        )
    if len(shape) != 1:
        add(Flatten())
        shape = (int(np.prod(shape)),)
    if shape[0] < 1:
        raise ShapeChainError(f"linear layer needs a non-empty input, got {shape}")
    return _weight_layer(
        "linear",
        (layer_spec.out_features, shape[0]),
        shape[0],
        layer_spec.weight_mode,
        layer_spec.weight_p,
        rng,
        precision,
    )


__all__ = [
    "Layer",
    "Linear",
    "Conv2d",
    "ActivationNorm",
    "Activation",
    "Flatten",
    "Network",
    "softmax_cross_entropy",
    "accuracy",
    "build_model",
]
