"""MMTN raw tensor files.

Layout (little-endian): ``b"MMTN"``, u32 version (=1), u8 dtype code
(0 = f32, 1 = f64), u32 rank, rank x u64 extents, row-major payload.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"MMTN"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {v: k for k, v in _CODES.items()}


class FormatError(ValueError):
    """Malformed or truncated tensor/checkpoint file."""


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what} ({len(buf)} of {n} bytes)")
    return buf


def write_tensor(f: BinaryIO, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        raise TypeError(f"MMTN stores float32/float64 only, got {arr.dtype}")
    f.write(MAGIC)
    f.write(struct.pack("<IBI", VERSION, _CODES[arr.dtype], arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, code, rank = struct.unpack("<IBI", _read_exact(f, 9, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported MMTN version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents"))
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(f, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()
