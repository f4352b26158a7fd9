"""Bit-exact tensor file I/O.

Layout: magic ``ASFT`` (4 bytes), version byte (1), dtype byte
(0 = little-endian IEEE-754 float32), ndim byte (1..4), then ndim u32
little-endian dims, then the row-major float32 payload (last axis fastest).
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, DimensionError, FormatError

MAGIC = b"ASFT"
VERSION = 1
DTYPE_F32 = 0
MAX_NDIM = 4
_HEADER = struct.Struct("<4sBBB")


def write_tensor(tensor: np.ndarray, path: str | os.PathLike) -> None:
    """Write a 1-4 dimensional array as a float32 tensor file.

    The write goes through a temp file and an atomic rename so a crash can
    never leave a half-written tensor behind.
    """
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_NDIM:
        raise DimensionError(f"tensor files support 1..{MAX_NDIM} dims, got {arr.ndim}")
    path = Path(path)
    payload = bytearray(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim))
    for dim in arr.shape:
        payload += struct.pack("<I", dim)
    payload += arr.tobytes(order="C")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a tensor file, validating magic, version, dtype and payload size."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file too short for a tensor header")
    magic, version, dtype, ndim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype}")
    if ndim < 1 or ndim > MAX_NDIM:
        raise FormatError(f"{path}: ndim {ndim} outside 1..{MAX_NDIM}")
    offset = _HEADER.size
    if len(data) < offset + 4 * ndim:
        raise CorruptionError(f"{path}: header truncated before dims")
    dims = struct.unpack_from(f"<{ndim}I", data, offset)
    offset += 4 * ndim
    count = 1
    for dim in dims:
        count *= dim
    expected = offset + 4 * count
    if len(data) != expected:
        raise CorruptionError(
            f"{path}: payload holds {(len(data) - offset) // 4} float32 values, "
            f"header declares {count}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=offset, count=count)
    return flat.reshape(dims).copy()
