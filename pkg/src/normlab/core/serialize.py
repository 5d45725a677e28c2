"""Binary tensor codec.

Layout (little-endian):

    offset  size      field
    0       4         magic "NLT1"
    4       1         element code (0=f64, 1=f32, 2=half, 3=half+wide accumulator)
    5       1         rank
    6       4*rank    dims as u32
    ...     8*size    payload, one f64 per element regardless of mode
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from normlab.core.precision import F32, F64, HALF, HALF_WIDE, PrecisionMode
from normlab.core.tensor import Tensor
from normlab.errors import ParseError
from normlab.utils.constants import TENSOR_MAGIC
from normlab.utils.fileio import write_bytes_atomic

_CODES = {F64: 0, F32: 1, HALF: 2, HALF_WIDE: 3}
_MODES = {code: mode for mode, code in _CODES.items()}


def encode_tensor(t: Tensor) -> bytes:
    header = TENSOR_MAGIC + struct.pack("<BB", _CODES[t.precision], t.rank)
    header += struct.pack(f"<{t.rank}I", *t.shape)
    return header + t.data.astype("<f8").tobytes()


def decode_tensor(payload: bytes) -> Tensor:
    """Parse bytes produced by encode_tensor.

    Raises:
        ParseError: bad magic, unknown element code, truncated header or payload
    """
    if payload[:4] != TENSOR_MAGIC:
        raise ParseError(f"bad magic {payload[:4]!r}, expected {TENSOR_MAGIC!r}", offset=0)
    if len(payload) < 6:
        raise ParseError("truncated header", offset=len(payload))

    code, rank = struct.unpack_from("<BB", payload, 4)
    if code not in _MODES:
        raise ParseError(f"unknown element code {code}", offset=4)
    precision: PrecisionMode = _MODES[code]

    dims_end = 6 + 4 * rank
    if len(payload) < dims_end:
        raise ParseError("truncated dimension list", offset=len(payload))
    shape = struct.unpack_from(f"<{rank}I", payload, 6)

    size = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = dims_end + 8 * size
    if len(payload) != expected:
        raise ParseError(f"payload is {len(payload) - dims_end} bytes, expected {8 * size}", offset=dims_end)

    values = np.frombuffer(payload, dtype="<f8", count=size, offset=dims_end).astype(np.float64)
    return Tensor.from_array(values.reshape(shape), precision)


def write_tensor(t: Tensor, path: Path) -> None:
    write_bytes_atomic(Path(path), encode_tensor(t))


def read_tensor(path: Path) -> Tensor:
    return decode_tensor(Path(path).read_bytes())


__all__ = ["encode_tensor", "decode_tensor", "write_tensor", "read_tensor"]
