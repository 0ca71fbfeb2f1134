"""PTM1 tensor container: a tiny, bit-exact binary format for numeric arrays.

Layout::

    b"PTM1" | u8 dtype code (0=f32, 1=f64) | u8 ndim | ndim x u32 LE extents | payload (row-major, LE)
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from streampoint.errors import FormatError

MAGIC = b"PTM1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _DTYPE_TO_CODE.get(array.dtype)
    if code is None:
        raise TypeError(f"PTM1 stores f32/f64 only, got {array.dtype}")
    header = MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_CODES[code]).tobytes(order="C")
    return header + payload


def loads(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise FormatError(f"{source}: missing PTM1 magic")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _CODES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    offset = 6 + 4 * ndim
    if len(blob) < offset:
        raise FormatError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{ndim}I", blob, 6)
    dtype = _CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise FormatError(
            f"{source}: payload is {len(blob) - offset} bytes, expected {expected} for shape {tuple(shape)}"
        )
    data = np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape)
    return data.astype(dtype.newbyteorder("="), copy=True)


def save(path: str | os.PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(dumps(array))


def load(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"{path}: file not found") from exc
    return loads(blob, source=str(path))
