"""Dataset ingestion: CSV, IDX and the built-in synthetic Gaussian mixture.

IDX files follow the handwritten-digit layout (big-endian):

    [offset] [type]          [value]
    0000     32 bit integer  0x00000803 (images) / 0x00000801 (labels)
    0004     32 bit integer  number of items
    0008     32 bit integer  rows            (images only)
    0012     32 bit integer  columns         (images only)
    ....     unsigned byte   pixels / labels

Pixel values are kept as stored (0-255); scaling is the caller's choice.
CSV rows are `label,feature_1,...,feature_d` with an optional header line.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from normlab.core.rng import Rng
from normlab.errors import LabelOutOfRange, ParseError
from normlab.schema.experiment import DataConfig
from normlab.utils.constants import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC
from normlab.utils.fileio import write_bytes_atomic, write_file_atomic

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    """Features (samples first) with integer labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.features.shape[0]} samples but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.features.shape[1:])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices])

    def scaled(self, factor: float) -> "Dataset":
        if factor == 1.0:
            return self
        return Dataset(self.features * factor, self.labels)


def check_labels(labels: np.ndarray, num_classes: Optional[int]) -> None:
    """Raise LabelOutOfRange for negative labels or labels >= num_classes."""
    if labels.size == 0:
        return
    low, high = int(labels.min()), int(labels.max())
    if low < 0:
        raise LabelOutOfRange(f"negative label {low}")
    if num_classes is not None and high >= num_classes:
        raise LabelOutOfRange(f"label {high} out of range for {num_classes} classes")


def split_dataset(data: Dataset, fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Seeded shuffle, then the first round(fraction * N) samples train; the rest validate."""
    n = len(data)
    if n < 2:
        raise ValueError(f"need at least two samples to split, got {n}")
    order = Rng(seed).permutation(n)
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    return data.subset(np.sort(order[:n_train])), data.subset(np.sort(order[n_train:]))


# -- CSV -----------------------------------------------------------------


def parse_csv_dataset(text: str) -> Dataset:
    """Parse `label,features...` rows.

    Raises:
        ParseError: non-numeric field, ragged rows or no data (byte offset of the row)
    """
    labels, rows = [], []
    width = None
    offset = 0
    for index, line in enumerate(text.splitlines(keepends=True)):
        row = line.strip()
        line_offset = offset
        offset += len(line.encode("utf-8"))
        if not row:
            continue
        fields = next(csv.reader([row]))
        try:
            label = int(fields[0])
        except ValueError:
            if index == 0:
                continue  # header
            raise ParseError(f"label {fields[0]!r} is not an integer", offset=line_offset) from None
        try:
            values = [float(f) for f in fields[1:]]
        except ValueError as e:
            raise ParseError(f"bad feature value: {e}", offset=line_offset) from None
        if not values:
            raise ParseError("row has a label but no features", offset=line_offset)
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise ParseError(f"expected {width} features, got {len(values)}", offset=line_offset)
        labels.append(label)
        rows.append(values)

    if not rows:
        raise ParseError("no data rows", offset=offset)
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64))


def write_csv_dataset(data: Dataset, path: Path) -> Path:
    """Write `data` as CSV with repr() floats so a reload is bit-exact."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    flat = data.features.reshape(len(data), -1)
    for label, values in zip(data.labels, flat):
        writer.writerow([int(label)] + [repr(float(v)) for v in values])
    path = Path(path)
    write_file_atomic(path, buffer.getvalue())
    return path


# -- IDX -----------------------------------------------------------------


def _idx_header(payload: bytes, magic: int, dims: int, what: str) -> Tuple[int, ...]:
    if len(payload) < 4:
        raise ParseError(f"{what} file shorter than its magic number", offset=0)
    (found,) = struct.unpack_from(">I", payload, 0)
    if found != magic:
        raise ParseError(f"bad {what} magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    end = 4 + 4 * dims
    if len(payload) < end:
        raise ParseError(f"truncated {what} header", offset=len(payload))
    return struct.unpack_from(f">{dims}I", payload, 4)


def parse_idx_images(payload: bytes) -> np.ndarray:
    """(N, 1, rows, cols) float64 pixels."""
    count, rows, cols = _idx_header(payload, IDX_IMAGES_MAGIC, 3, "image")
    expected = count * rows * cols
    body = payload[16:]
    if len(body) != expected:
        raise ParseError(f"image payload is {len(body)} bytes, expected {expected}", offset=16)
    pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float64)
    return pixels.reshape(count, 1, rows, cols)


def parse_idx_labels(payload: bytes) -> np.ndarray:
    (count,) = _idx_header(payload, IDX_LABELS_MAGIC, 1, "label")
    body = payload[8:]
    if len(body) != count:
        raise ParseError(f"label payload is {len(body)} bytes, expected {count}", offset=8)
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def write_idx_dataset(data: Dataset, images_path: Path, labels_path: Path) -> Tuple[Path, Path]:
    """Write `data` as IDX image/label files; features must be integers in 0-255."""
    features = data.features
    if features.ndim == 4:
        if features.shape[1] != 1:
            raise ValueError("IDX images hold a single channel")
        features = features[:, 0]
    if features.ndim != 3:
        raise ValueError(f"IDX images need (N, rows, cols) features, got {data.features.shape}")
    if np.any(features != np.round(features)) or features.min() < 0 or features.max() > 255:
        raise ValueError("IDX pixels must be integers in 0-255")
    if data.labels.min() < 0 or data.labels.max() > 255:
        raise ValueError("IDX labels must lie in 0-255")

    count, rows, cols = features.shape
    images = struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + features.astype(np.uint8).tobytes()
    labels = struct.pack(">II", IDX_LABELS_MAGIC, count) + data.labels.astype(np.uint8).tobytes()
    write_bytes_atomic(Path(images_path), images)
    write_bytes_atomic(Path(labels_path), labels)
    return Path(images_path), Path(labels_path)


# -- synthetic -----------------------------------------------------------


def generate_synthetic(
    samples: int,
    features: int,
    classes: int = 2,
    separation: float = 1.0,
    seed: int = 0,
    image_side: Optional[int] = None,
) -> Dataset:
    """Gaussian mixture: unit-variance noise around class means `separation` apart.

    Class means sit on a random simplex-like set of directions; labels are
    balanced. With `image_side` the features are reshaped to (1, side, side).
    """
    if image_side is not None and image_side * image_side != features:
        raise ValueError(f"image_side {image_side} does not match {features} features")
    means_rng, noise_rng, order_rng = Rng(seed).spawn(3)
    directions = means_rng.normal((classes, features))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = directions * (separation / math.sqrt(2.0))

    labels = np.arange(samples, dtype=np.int64) % classes
    labels = labels[order_rng.permutation(samples)]
    x = means[labels] + noise_rng.normal((samples, features))
    if image_side is not None:
        x = x.reshape(samples, 1, image_side, image_side)
    return Dataset(x, labels)


def load_dataset(
    path: Optional[Path],
    fmt: str = "csv",
    labels_path: Optional[Path] = None,
    split: float = 0.8,
    seed: int = 0,
    num_classes: Optional[int] = None,
) -> Tuple[Dataset, Dataset]:
    """Load a CSV or IDX dataset and split it into (train, validation).

    Raises:
        ParseError: malformed file (byte offset reported)
        LabelOutOfRange: label outside [0, num_classes)
        OSError: unreadable file
    """
    if fmt == "csv":
        data = parse_csv_dataset(Path(path).read_text(encoding="utf-8"))
    elif fmt == "idx":
        if labels_path is None:
            raise ValueError("IDX datasets need a labels file")
        images = parse_idx_images(Path(path).read_bytes())
        labels = parse_idx_labels(Path(labels_path).read_bytes())
        if len(images) != len(labels):
            raise ParseError(f"{len(images)} images but {len(labels)} labels", offset=4)
        data = Dataset(images, labels)
    else:
        raise ValueError(f"Unknown dataset format '{fmt}'")

    check_labels(data.labels, num_classes)
    logger.info(f"Loaded {len(data)} samples of shape {data.sample_shape} from {path}")
    return split_dataset(data, split, seed)


def load_from_config(config: DataConfig, seed: int, num_classes: Optional[int] = None) -> Tuple[Dataset, Dataset]:
    """Dataset described by a DataConfig, split and scaled."""
    if config.format == "synthetic":
        data = generate_synthetic(
            config.samples, config.features, config.classes, config.separation, seed, config.image_side
        )
        check_labels(data.labels, num_classes)
        train, val = split_dataset(data, config.split, seed)
    else:
        train, val = load_dataset(config.path, config.format, config.labels_path, config.split, seed, num_classes)
    return train.scaled(config.scale), val.scaled(config.scale)


__all__ = [
    "Dataset",
    "check_labels",
    "split_dataset",
    "parse_csv_dataset",
    "write_csv_dataset",
    "parse_idx_images",
    "parse_idx_labels",
    "write_idx_dataset",
    "generate_synthetic",
    "load_dataset",
    "load_from_config",
]
