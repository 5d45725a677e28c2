"""Tests for CSV, IDX and synthetic dataset ingestion."""

import struct

import numpy as np
import pytest

from normlab.errors import LabelOutOfRange, ParseError
from normlab.schema.experiment import DataConfig
from normlab.train.data import (
    Dataset,
    check_labels,
    generate_synthetic,
    load_dataset,
    load_from_config,
    parse_csv_dataset,
    parse_idx_images,
    parse_idx_labels,
    split_dataset,
    write_csv_dataset,
    write_idx_dataset,
)


class TestSplit:
    def test_disjoint_and_exhaustive(self):
        data = Dataset(np.arange(20.0).reshape(10, 2), np.arange(10) % 2)
        train, val = split_dataset(data, 0.8, seed=4)
        assert len(train) == 8
        assert len(val) == 2
        seen = sorted(train.features[:, 0].tolist() + val.features[:, 0].tolist())
        assert seen == data.features[:, 0].tolist()

    def test_seeded(self):
        data = Dataset(np.arange(40.0).reshape(20, 2), np.zeros(20, dtype=np.int64))
        a, _ = split_dataset(data, 0.5, seed=9)
        b, _ = split_dataset(data, 0.5, seed=9)
        assert np.array_equal(a.features, b.features)

    def test_both_sides_non_empty(self):
        data = Dataset(np.zeros((3, 1)), np.zeros(3, dtype=np.int64))
        train, val = split_dataset(data, 0.99, seed=0)
        assert len(train) == 2
        assert len(val) == 1

    def test_too_small(self):
        with pytest.raises(ValueError):
            split_dataset(Dataset(np.zeros((1, 1)), np.zeros(1, dtype=np.int64)), 0.5, seed=0)


class TestCsv:
    def test_header_is_skipped(self):
        data = parse_csv_dataset("label,x,y\n1,0.5,2\n0,-1,3.25\n")
        assert data.labels.tolist() == [1, 0]
        assert data.features.tolist() == [[0.5, 2.0], [-1.0, 3.25]]

    def test_ragged_row_offset(self):
        text = "0,1,2\n1,3\n"
        with pytest.raises(ParseError) as exc:
            parse_csv_dataset(text)
        assert exc.value.offset == len("0,1,2\n")

    def test_non_integer_label_after_first_row(self):
        with pytest.raises(ParseError) as exc:
            parse_csv_dataset("0,1\nx,2\n")
        assert exc.value.offset == 4

    def test_bad_feature(self):
        with pytest.raises(ParseError):
            parse_csv_dataset("0,abc\n")

    def test_no_rows(self):
        with pytest.raises(ParseError):
            parse_csv_dataset("label,x\n")

    def test_write_then_load(self, tmp_path):
        data = generate_synthetic(12, 3, seed=2)
        path = write_csv_dataset(data, tmp_path / "d.csv")
        train, val = load_dataset(path, "csv", split=0.5, seed=1)
        merged = np.concatenate([train.features, val.features])
        assert sorted(map(tuple, merged.tolist())) == sorted(map(tuple, data.features.tolist()))


def test_check_labels():
    check_labels(np.array([0, 1, 2]), 3)
    with pytest.raises(LabelOutOfRange):
        check_labels(np.array([0, 3]), 3)
    with pytest.raises(LabelOutOfRange):
        check_labels(np.array([-1, 0]), None)


def test_load_rejects_labels_beyond_classes(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("0,1.0\n5,2.0\n")
    with pytest.raises(LabelOutOfRange):
        load_dataset(path, "csv", num_classes=2)


class TestIdx:
    def _data(self):
        pixels = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 1, 3, 4)
        return Dataset(pixels, np.array([7, 1]))

    def test_round_trip(self, tmp_path):
        data = self._data()
        images, labels = write_idx_dataset(data, tmp_path / "img.idx", tmp_path / "lbl.idx")
        assert np.array_equal(parse_idx_images(images.read_bytes()), data.features)
        assert parse_idx_labels(labels.read_bytes()).tolist() == [7, 1]

    def test_bad_magic(self):
        with pytest.raises(ParseError) as exc:
            parse_idx_images(struct.pack(">IIII", 0x801, 0, 1, 1))
        assert exc.value.offset == 0

    def test_truncated_pixels(self):
        payload = struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(7)
        with pytest.raises(ParseError, match="expected 8"):
            parse_idx_images(payload)

    def test_truncated_header(self):
        with pytest.raises(ParseError):
            parse_idx_labels(struct.pack(">I", 0x801))

    def test_count_mismatch(self, tmp_path):
        data = self._data()
        images, _ = write_idx_dataset(data, tmp_path / "img.idx", tmp_path / "lbl.idx")
        labels = tmp_path / "three.idx"
        labels.write_bytes(struct.pack(">II", 0x801, 3) + bytes(3))
        with pytest.raises(ParseError):
            load_dataset(images, "idx", labels_path=labels)

    def test_non_byte_pixels_are_rejected(self, tmp_path):
        data = Dataset(np.full((1, 2, 2), 0.5), np.array([0]))
        with pytest.raises(ValueError):
            write_idx_dataset(data, tmp_path / "a", tmp_path / "b")


class TestSynthetic:
    def test_shape_and_balance(self):
        data = generate_synthetic(100, 16, classes=4, seed=1)
        assert data.features.shape == (100, 16)
        assert np.bincount(data.labels).tolist() == [25, 25, 25, 25]

    def test_images(self):
        data = generate_synthetic(10, 16, image_side=4)
        assert data.sample_shape == (1, 4, 4)

    def test_image_side_must_match(self):
        with pytest.raises(ValueError):
            generate_synthetic(10, 15, image_side=4)

    def test_deterministic(self):
        a, b = generate_synthetic(20, 3, seed=5), generate_synthetic(20, 3, seed=5)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)

    def test_separation_moves_class_means_apart(self):
        def mean_gap(separation):
            data = generate_synthetic(4000, 8, separation=separation, seed=3)
            means = [data.features[data.labels == c].mean(axis=0) for c in (0, 1)]
            return np.linalg.norm(means[0] - means[1])

        assert mean_gap(6.0) > 4.0 * mean_gap(0.5)


def test_load_from_config_scales_inputs():
    config = DataConfig(samples=40, features=3, scale=2.0)
    train, val = load_from_config(config, seed=0)
    base_train, _ = load_from_config(DataConfig(samples=40, features=3), seed=0)
    assert len(train) + len(val) == 40
    assert np.array_equal(train.features, 2.0 * base_train.features)
