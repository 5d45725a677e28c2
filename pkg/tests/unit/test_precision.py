"""Tests for precision modes, tensor arithmetic and the tensor codec."""

import math

import numpy as np
import pytest

from normlab.core.precision import F32, F64, HALF, HALF_WIDE, Accumulator, Element, PrecisionMode, round_half
from normlab.core.rng import Rng
from normlab.core.serialize import decode_tensor, encode_tensor, read_tensor, write_tensor
from normlab.core.tensor import Tensor, matmul, topk_abs, topk_mask
from normlab.errors import AxisOutOfRange, EmptyAxis, KOutOfRange, ParseError, PrecisionMismatch, ShapeMismatch


class TestPrecisionMode:
    def test_labels_parse_back(self):
        for mode in (F64, F32, HALF, HALF_WIDE):
            assert PrecisionMode.parse(mode.label) == mode

    def test_parse_accepts_underscore(self):
        assert PrecisionMode.parse("HALF_WIDE") == HALF_WIDE

    def test_unknown_label(self):
        with pytest.raises(ValueError, match="Unknown precision"):
            PrecisionMode.parse("bf16")

    def test_wide_accumulator_needs_half_elements(self):
        with pytest.raises(ValueError):
            PrecisionMode(Element.F32, Accumulator.WIDE)


def test_round_half_limits():
    """binary16 max is 65504; anything rounding above it overflows."""
    assert round_half(65504.0) == 65504.0
    assert round_half(65519.0) == 65504.0
    assert math.isinf(round_half(65520.0))
    assert round_half(1.0 + 2**-11) == 1.0  # ties to even
    assert round_half(1.0 + 3 * 2**-11) == 1.0 + 2**-9


@pytest.mark.parametrize("value", [256.0, 300.0, 1000.0, 60000.0])
def test_half_square_overflows_while_abs_stays_finite(value):
    t = Tensor([value, -value], HALF)
    assert np.all(np.isinf(t.square().array))
    assert np.all(np.isfinite(t.abs().array))


def test_half_square_just_below_limit_is_finite():
    t = Tensor([255.875], HALF)
    assert t.square().array[0] == 65472.0


def test_half_stores_representable_values():
    t = Tensor([0.1, 1.0 / 3.0], HALF)
    assert np.array_equal(t.array, np.array([0.1, 1.0 / 3.0]).astype(np.float16).astype(np.float64))


def test_half_rejects_nan_inputs():
    with pytest.raises(ValueError, match="NaN"):
        Tensor([1.0, float("nan")], HALF)


def test_half_sum_is_sequential():
    """60000 + 10000 overflows in binary16 before the -10000 arrives."""
    values = [[60000.0], [10000.0], [-10000.0]]
    assert Tensor(values, F64).sum(0).item() == 60000.0
    assert math.isinf(Tensor(values, HALF).sum(0).item())
    assert Tensor(values, HALF_WIDE).sum(0).item() == 60000.0


def test_half_matmul_accumulator_width():
    a_values = [[60000.0, 10000.0, -10000.0]]
    b_values = [[1.0], [1.0], [1.0]]
    same = matmul(Tensor(a_values, HALF), Tensor(b_values, HALF))
    wide = matmul(Tensor(a_values, HALF_WIDE), Tensor(b_values, HALF_WIDE))
    assert math.isinf(same.item())
    assert wide.item() == 60000.0


def test_f32_rounds_results():
    t = Tensor([1.0], F32) / 3.0
    assert t.item() == float(np.float32(1.0) / np.float32(3.0))


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.array[0] = 5.0


def test_mixed_precision_is_rejected():
    with pytest.raises(PrecisionMismatch):
        Tensor([1.0], F64) + Tensor([1.0], F32)


def test_broadcast_rules():
    a = Tensor(np.ones((3, 4)))
    assert (a + Tensor(np.ones((1, 4)))).shape == (3, 4)
    with pytest.raises(ShapeMismatch):
        a + Tensor(np.ones((2, 4)))
    with pytest.raises(ShapeMismatch):
        a + Tensor(np.ones(4))


def test_only_the_right_operand_broadcasts():
    column = Tensor(np.arange(3.0).reshape(3, 1))
    assert (Tensor(np.ones((3, 4))) * column).shape == (3, 4)
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((1, 4))) + Tensor(np.ones((3, 4)))
    with pytest.raises(ShapeMismatch):
        column * Tensor(np.ones((3, 4)))


def test_division_by_zero_follows_ieee():
    out = Tensor([1.0, -1.0, 0.0]) / Tensor([0.0, 0.0, 0.0])
    assert out.array[0] == math.inf
    assert out.array[1] == -math.inf
    assert math.isnan(out.array[2])


def test_div_or_zero():
    out = Tensor([1.0, 2.0]).div_or_zero(Tensor([0.0, 4.0]))
    assert out.array.tolist() == [0.0, 0.5]


class TestReductions:
    def test_axis_out_of_range(self):
        with pytest.raises(AxisOutOfRange):
            Tensor(np.ones((2, 3))).sum(2)

    def test_empty_axis(self):
        with pytest.raises(EmptyAxis):
            Tensor(np.ones((0, 3))).mean(0)

    def test_keepdims(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.sum(0).shape == (1, 3)
        assert t.sum(1, keepdims=False).shape == (2,)
        assert t.max_abs(1).array.ravel().tolist() == [2.0, 5.0]


class TestTopK:
    def test_k_out_of_range(self):
        t = Tensor(np.ones((4, 2)))
        with pytest.raises(KOutOfRange):
            topk_abs(t, 0, 0)
        with pytest.raises(KOutOfRange):
            topk_abs(t, 0, 5)

    def test_ties_prefer_lower_index(self):
        mask = topk_mask(Tensor([[1.0], [-2.0], [2.0], [0.5]]), 0, 1)
        assert mask.ravel().tolist() == [False, True, False, False]

    def test_top_n_matches_mean_abs_bitwise(self):
        x = Tensor(Rng(3).normal((16, 5)))
        assert np.array_equal(topk_abs(x, 0, 16).array, x.abs().mean(0).array)

    def test_top_one_matches_max_abs_bitwise(self):
        x = Tensor(Rng(4).normal((16, 5)))
        assert np.array_equal(topk_abs(x, 0, 1).array, x.max_abs(0).array)

    def test_top_k_value(self):
        x = Tensor([[3.0], [-1.0], [2.0], [0.5]])
        assert topk_abs(x, 0, 2).item() == 2.5


class TestCodec:
    def test_round_trip_keeps_mode_and_values(self, tmp_path):
        t = Tensor(Rng(1).normal((2, 3, 4)), HALF_WIDE)
        path = tmp_path / "t.bin"
        write_tensor(t, path)
        back = read_tensor(path)
        assert back.precision == HALF_WIDE
        assert back.shape == (2, 3, 4)
        assert np.array_equal(back.array, t.array)

    def test_bad_magic(self):
        payload = bytearray(encode_tensor(Tensor([1.0])))
        payload[0:4] = b"XXXX"
        with pytest.raises(ParseError) as exc:
            decode_tensor(bytes(payload))
        assert exc.value.offset == 0

    def test_unknown_element_code(self):
        payload = bytearray(encode_tensor(Tensor([1.0])))
        payload[4] = 9
        with pytest.raises(ParseError) as exc:
            decode_tensor(bytes(payload))
        assert exc.value.offset == 4

    def test_truncated_payload(self):
        payload = encode_tensor(Tensor([1.0, 2.0]))
        with pytest.raises(ParseError, match="expected 16"):
            decode_tensor(payload[:-3])


class TestRng:
    def test_same_seed_same_stream(self):
        assert np.array_equal(Rng(7).normal((5,)), Rng(7).normal((5,)))

    def test_spawned_streams_are_reproducible_and_distinct(self):
        a1, b1 = Rng(7).spawn(2)
        a2, _ = Rng(7).spawn(2)
        first = a1.normal((4,))
        assert np.array_equal(first, a2.normal((4,)))
        assert not np.array_equal(first, b1.normal((4,)))

    def test_seed_range(self):
        with pytest.raises(ValueError):
            Rng(-1)
