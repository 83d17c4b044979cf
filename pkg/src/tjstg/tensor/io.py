"""TJT1 binary tensor files.

Layout: magic ``b"TJT1"``, little-endian u32 rank, ``rank`` little-endian
u64 extents, then the row-major float64 little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .core import Tensor

MAGIC = b"TJT1"


class TensorFormatError(ValueError):
    pass


def encode_tensor(x) -> bytes:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic, not a TJT1 tensor")
    if len(buf) < 8:
        raise TensorFormatError("truncated header")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated extents")
    shape = struct.unpack_from(f"<{rank}Q", buf, 8)
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(buf) != off + 8 * n:
        raise TensorFormatError(f"payload is {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", offset=off).reshape(shape).astype(np.float64)


def write_tensor(path: Union[str, Path], x) -> None:
    Path(path).write_bytes(encode_tensor(x))


def read_tensor(path: Union[str, Path]) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
