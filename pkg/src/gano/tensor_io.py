"""GTNSR1 binary tensor encoding.

Layout: the six magic bytes ``GTNSR1``, a u8 dtype code (0 = f64, 1 = f32),
a u8 rank, ``rank`` little-endian u32 extents, then the row-major
little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"GTNSR1"
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


class TensorFormatError(ValueError):
    pass


def encode(array: np.ndarray, dtype=np.float64) -> bytes:
    arr = np.asarray(array)
    dt = np.dtype(dtype)
    if dt not in CODES:
        raise TensorFormatError(f"unsupported dtype {dt}")
    if arr.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=DTYPES[CODES[dt]]).tobytes()
    return header + payload


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    end = offset + len(MAGIC)
    if buf[offset:end] != MAGIC:
        raise TensorFormatError(
            f"bad magic at byte {offset}: expected {MAGIC!r}, found {bytes(buf[offset:end])!r}"
        )
    if len(buf) < end + 2:
        raise TensorFormatError("truncated header")
    code, ndim = struct.unpack_from("<BB", buf, end)
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    end += 2
    if len(buf) < end + 4 * ndim:
        raise TensorFormatError("truncated extents")
    shape = struct.unpack_from(f"<{ndim}I", buf, end)
    end += 4 * ndim
    dt = DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < end + nbytes:
        raise TensorFormatError(
            f"truncated payload: need {nbytes} bytes, have {len(buf) - end}"
        )
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=end)
    return arr.reshape(shape).astype(np.float64), end + nbytes


def save(path, array: np.ndarray, dtype=np.float64) -> None:
    Path(path).write_bytes(encode(array, dtype))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode(buf)
    if end != len(buf):
        raise TensorFormatError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def write_stream(fh: BinaryIO, array: np.ndarray, dtype=np.float64) -> int:
    return fh.write(encode(array, dtype))
