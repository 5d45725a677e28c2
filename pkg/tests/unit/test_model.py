"""Tests for layers, networks and model construction."""

import math

import numpy as np
import pytest

from normlab.core.rng import Rng
from normlab.core.tensor import Tensor
from normlab.errors import ShapeChainError
from normlab.norms.activation import StatsMode
from normlab.schema.experiment import LayerSpec, ModelSpec, NormScheme
from normlab.train.model import (
    Activation,
    ActivationNorm,
    Conv2d,
    Flatten,
    Linear,
    Network,
    accuracy,
    build_model,
    softmax_cross_entropy,
)


def _finite_difference(f, x, h=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        grad[idx] = (f(up) - f(down)) / (2 * h)
    return grad


def _rel_err(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _mlp(norm=NormScheme(), activation="tanh", seed=5):
    spec = ModelSpec(
        input_shape=(4,),
        layers=[LayerSpec(out_features=6, norm=norm), LayerSpec(out_features=5, norm=norm)],
        activation=activation,
        num_classes=3,
    )
    return build_model(spec, seed=seed)


def _cnn(norm=NormScheme(), seed=6):
    spec = ModelSpec(
        input_shape=(2, 4, 4),
        layers=[LayerSpec(kind="conv", out_features=3, norm=norm), LayerSpec(out_features=4)],
        activation="tanh",
        num_classes=2,
    )
    return build_model(spec, seed=seed)


class TestBuild:
    def test_mlp_layer_stack(self):
        model = _mlp()
        kinds = [type(layer) for layer in model.layers]
        assert kinds == [Linear, ActivationNorm, Activation, Linear, ActivationNorm, Activation, Linear]
        assert model.forward(Tensor(np.ones((3, 4)))).shape == (3, 3)

    def test_cnn_gets_implicit_flatten(self):
        model = _cnn()
        kinds = [type(layer) for layer in model.layers]
        assert kinds == [Conv2d, ActivationNorm, Activation, Flatten, Linear, Activation, Linear]
        assert model.forward(Tensor(Rng(1).normal((2, 2, 4, 4)))).shape == (2, 2)

    def test_conv_needs_image_input(self):
        spec = ModelSpec(input_shape=(16,), layers=[LayerSpec(kind="conv", out_features=3)])
        with pytest.raises(ShapeChainError):
            build_model(spec, seed=0)

    def test_missing_input_shape(self):
        with pytest.raises(ShapeChainError):
            build_model(ModelSpec(layers=[LayerSpec(out_features=3)]), seed=0)

    def test_network_needs_linear_head(self):
        with pytest.raises(ShapeChainError):
            Network([Activation("relu")])

    def test_initialization_std(self):
        spec = ModelSpec(input_shape=(400,), layers=[LayerSpec(out_features=300)])
        weight = build_model(spec, seed=2).layers[0].weight.array
        assert weight.std() == pytest.approx(math.sqrt(2.0 / 400), rel=0.02)

    def test_normalization_does_not_change_initial_weights(self):
        plain = _mlp(norm=None)
        l1 = _mlp(norm=NormScheme(metric="l1"))
        assert np.array_equal(plain.layers[0].weight.array, l1.layers[0].weight.array)
        assert np.array_equal(plain.head.weight.array, l1.head.weight.array)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            Activation("gelu")


class TestLayerSets:
    def test_normalized_and_tracked_layers(self):
        model = _mlp()
        assert [i for i, _ in model.normalized_layers()] == [0, 3]
        assert [i for i, _ in model.tracked_layers()] == [0, 3]

    def test_mean_only_is_not_normalized(self):
        assert _mlp(norm=NormScheme(mean_only=True)).normalized_layers() == []

    def test_tracked_falls_back_to_head(self):
        model = build_model(ModelSpec(input_shape=(3,)), seed=0)
        assert [i for i, _ in model.tracked_layers()] == [0]

    def test_state_arrays_keys(self):
        keys = set(_mlp().state_arrays())
        assert {"0.weight", "0.bias", "1.gamma", "1.beta", "6.weight"} <= keys


class TestGradients:
    def _check(self, model, x, labels, index, name):
        param = dict(model.layers[index].parameters())[name]

        def loss(values):
            trial = model.copy()
            trial.layers[index].set_parameter(name, Tensor(values))
            value, _ = softmax_cross_entropy(trial.forward(Tensor(x), StatsMode.TRAIN), labels)
            return value

        _, grad = softmax_cross_entropy(model.forward(Tensor(x), StatsMode.TRAIN), labels)
        grad_x = model.backward(grad)
        analytic = model.layers[index].gradients()[name].array
        assert _rel_err(analytic, _finite_difference(loss, param.numpy())) <= 1e-5
        return grad_x

    @pytest.mark.parametrize("metric,k", [("l2", None), ("l1", None), ("linf", None), ("topk", 3)])
    def test_mlp_weight_gradient(self, metric, k):
        model = _mlp(norm=NormScheme(metric=metric, k=k))
        x = Rng(3).normal((8, 4))
        self._check(model, x, np.arange(8) % 3, 0, "weight")

    def test_mlp_input_and_affine_gradients(self):
        model = _mlp()
        x = Rng(4).normal((8, 4))
        labels = np.arange(8) % 3
        grad_x = self._check(model, x, labels, 1, "gamma")

        def loss_x(values):
            value, _ = softmax_cross_entropy(model.copy().forward(Tensor(values), StatsMode.TRAIN), labels)
            return value

        assert _rel_err(grad_x.array, _finite_difference(loss_x, x)) <= 1e-5

    def test_cnn_gradients(self):
        model = _cnn()
        x = Rng(5).normal((3, 2, 4, 4))
        labels = np.array([0, 1, 0])
        self._check(model, x, labels, 0, "weight")
        self._check(model, x, labels, 4, "weight")

    def test_bwn_gradient(self):
        spec = ModelSpec(
            input_shape=(4,),
            layers=[LayerSpec(out_features=5, weight_mode="bwn", norm=NormScheme(metric="l1"))],
            activation="tanh",
            num_classes=2,
        )
        model = build_model(spec, seed=8)
        self._check(model, Rng(9).normal((6, 4)), np.arange(6) % 2, 0, "v")


def test_conv_matches_direct_convolution():
    x = Rng(10).normal((1, 2, 5, 5))
    w = Rng(11).normal((3, 2, 3, 3))
    conv = Conv2d(Tensor(w), Tensor(np.zeros((1, 3))))
    out = conv.forward(Tensor(x), StatsMode.TRAIN).array
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                expected[0, o, i, j] = np.sum(padded[0, :, i : i + 3, j : j + 3] * w[o])
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_softmax_cross_entropy_uniform_logits():
    loss, grad = softmax_cross_entropy(Tensor(np.zeros((4, 5))), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(5.0))
    assert np.allclose(grad.array.sum(axis=1), 0.0)


def test_accuracy():
    head = Linear(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[0.0, 0.0]]))
    model = Network([head])
    x = Tensor([[2.0, 1.0], [0.0, 3.0], [5.0, 4.0]])
    assert accuracy(model, x, np.array([0, 1, 1])) == pytest.approx(2 / 3)
    assert accuracy(model, x, np.array([], dtype=np.int64)) == 0.0
