"""Tests for weight normalization, bounded weight normalization and rho folding."""

import math

import numpy as np
import pytest

from normlab.core.rng import Rng
from normlab.core.tensor import Tensor
from normlab.errors import NonHomogeneousActivation, ZeroNormChannel
from normlab.norms.activation import StatsMode
from normlab.norms.weight import (
    BoundedWeight,
    WeightNormMode,
    bwn_backward,
    bwn_effective,
    channel_norms,
    fold_rho_into_classifier,
    project_to_norm,
    rho_init,
    wn_backward,
    wn_effective,
)
from normlab.schema.experiment import LayerSpec, ModelSpec, NormScheme
from normlab.train.model import build_model


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


class TestRho:
    def test_rho_l2_is_frobenius_over_sqrt_n(self):
        V = Tensor(Rng(1).normal((6, 5)))
        expected = np.linalg.norm(V.array) / math.sqrt(6)
        assert rho_init(V, 2.0) == pytest.approx(expected, rel=1e-14)

    def test_rho_l1_and_linf(self):
        V = Tensor([[1.0, -2.0], [3.0, 0.5]])
        assert rho_init(V, 1.0) == pytest.approx(6.5 / 2)
        assert rho_init(V, float("inf")) == 3.0

    def test_invalid_order(self):
        with pytest.raises(ValueError):
            rho_init(Tensor(np.ones((2, 2))), 3.0)


class TestEffectiveWeights:
    @pytest.mark.parametrize("p", [1.0, 2.0, float("inf")])
    def test_bwn_channels_have_norm_rho(self, p):
        v = Tensor(Rng(2).normal((4, 7)))
        w = bwn_effective(v, 0.37, p)
        assert np.allclose(channel_norms(w, p).array, 0.37, rtol=1e-14)

    def test_bwn_conv_kernels_are_flattened_per_channel(self):
        v = Tensor(Rng(3).normal((3, 2, 3, 3)))
        w = bwn_effective(v, 1.5)
        norms = np.linalg.norm(w.array.reshape(3, -1), axis=1)
        assert np.allclose(norms, 1.5, rtol=1e-14)

    def test_wn_uses_per_channel_scale(self):
        v = Tensor(Rng(4).normal((3, 4)))
        g = Tensor([[1.0], [2.0], [3.0]])
        norms = np.linalg.norm(wn_effective(v, g).array, axis=1)
        assert np.allclose(norms, [1.0, 2.0, 3.0], rtol=1e-14)

    def test_zero_channel_is_rejected(self):
        v = Tensor([[1.0, 2.0], [0.0, 0.0]])
        with pytest.raises(ZeroNormChannel, match=r"\[1\]"):
            bwn_effective(v, 1.0)

    def test_project_to_norm(self):
        v = Tensor(Rng(5).normal((2, 3)))
        assert np.allclose(np.linalg.norm(project_to_norm(v, 4.0).array, axis=1), 4.0)


class TestBackward:
    @pytest.mark.parametrize("p", [1.0, 2.0, float("inf")])
    def test_bwn_backward_matches_finite_differences(self, p):
        v = Rng(6).normal((3, 4))
        upstream = Rng(7).normal((3, 4))

        def loss(values):
            return float(np.sum(bwn_effective(Tensor(values), 0.8, p).array * upstream))

        grad_v = bwn_backward(Tensor(upstream), Tensor(v), 0.8, p)
        assert _rel_err(grad_v.array, _finite_difference(loss, v)) <= 1e-5

    def test_bwn_gradient_is_orthogonal_to_v(self):
        v = Rng(8).normal((5, 6))
        grad_v = bwn_backward(Tensor(Rng(9).normal((5, 6))), Tensor(v), 1.3).array
        dots = np.abs(np.sum(grad_v * v, axis=1))
        assert np.all(dots <= 1e-12 * np.linalg.norm(grad_v, axis=1) * np.linalg.norm(v, axis=1))

    def test_wn_backward_matches_finite_differences(self):
        v = Rng(10).normal((3, 4))
        g = np.array([[0.5], [1.5], [2.0]])
        upstream = Rng(11).normal((3, 4))
        grad_v, grad_g = wn_backward(Tensor(upstream), Tensor(v), Tensor(g))

        def loss_v(values):
            return float(np.sum(wn_effective(Tensor(values), Tensor(g)).array * upstream))

        def loss_g(values):
            return float(np.sum(wn_effective(Tensor(v), Tensor(values)).array * upstream))

        assert _rel_err(grad_v.array, _finite_difference(loss_v, v)) <= 1e-5
        assert _rel_err(grad_g.array, _finite_difference(loss_g, g)) <= 1e-5


class TestBoundedWeight:
    def test_from_init_bwn(self):
        V = Tensor(Rng(12).normal((4, 3)))
        bw = BoundedWeight.from_init(V)
        assert bw.mode is WeightNormMode.BWN
        assert bw.rho == rho_init(V)
        assert bw.backward(Tensor(np.ones((4, 3))))[1] is None

    def test_from_init_wn_reproduces_initial_weights(self):
        V = Tensor(Rng(13).normal((4, 3)))
        bw = BoundedWeight.from_init(V, mode="wn")
        assert np.allclose(bw.effective().array, V.array, rtol=1e-14)
        assert bw.backward(Tensor(np.ones((4, 3))))[1].shape == (4, 1)

    def test_wn_needs_g(self):
        with pytest.raises(ValueError):
            BoundedWeight(Tensor(np.ones((2, 2))), mode="wn")

    def test_rho_must_be_positive(self):
        with pytest.raises(ValueError):
            BoundedWeight(Tensor(np.ones((2, 2))), rho=0.0)


def _bwn_model(norm, activation="relu"):
    layer = dict(out_features=6, weight_mode="bwn", norm=norm)
    spec = ModelSpec(
        input_shape=(5,),
        layers=[LayerSpec(**layer), LayerSpec(**layer)],
        activation=activation,
        num_classes=3,
        classifier_mode="bwn",
    )
    return build_model(spec, seed=21)


class TestFoldRho:
    def test_fold_preserves_outputs(self):
        model = _bwn_model(NormScheme(mean_only=True))
        model.forward(Tensor(Rng(22).normal((32, 5))), StatsMode.TRAIN)
        folded = fold_rho_into_classifier(model)

        x = Tensor(Rng(23).normal((100, 5)))
        before = model.forward(x, StatsMode.EVAL).array
        after = folded.forward(x, StatsMode.EVAL).array
        assert np.max(np.abs(after - before)) <= 1e-9 * np.max(np.abs(before))

    def test_fold_sets_rho_to_one_and_plain_head(self):
        folded = fold_rho_into_classifier(_bwn_model(None))
        hidden = [layer for _, layer in folded.weight_layers()[:-1]]
        assert all(layer.bounded.rho == 1.0 for layer in hidden)
        assert folded.head.bounded is None

    def test_dividing_normalization_cannot_fold(self):
        with pytest.raises(NonHomogeneousActivation):
            fold_rho_into_classifier(_bwn_model(NormScheme(metric="l1")))

    def test_tanh_cannot_fold(self):
        with pytest.raises(NonHomogeneousActivation):
            fold_rho_into_classifier(_bwn_model(None, activation="tanh"))
