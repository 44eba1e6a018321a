"""Minimal binary tensor container.

Layout (little-endian throughout)::

    b"T1PT" | version u8 | dtype code u8 | rank u8 | dims u32 x rank | payload

Payload is row-major. Complex data is stored as interleaved float32
(re, im) pairs.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"T1PT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<c8"), 2: np.dtype("u1")}
CODES = {v: k for k, v in DTYPES.items()}


class RawTensorError(ValueError):
    pass


def _code_for(arr):
    if arr.dtype == np.bool_ or arr.dtype == np.uint8:
        return 2
    if np.iscomplexobj(arr):
        return 1
    if np.issubdtype(arr.dtype, np.number):
        return 0
    raise RawTensorError(f"unsupported dtype {arr.dtype}")


def encode(array) -> bytes:
    """Serialize ``array``; floats become f32, complex c64, bool/uint8 u8."""
    arr = np.asarray(array)
    code = _code_for(arr)
    if arr.ndim > 255:
        raise RawTensorError("rank above 255")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise RawTensorError("dimension exceeds u32")
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise RawTensorError("bad magic")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise RawTensorError(f"unsupported version {version}")
    if code not in DTYPES:
        raise RawTensorError(f"unknown dtype code {code}")
    off = 7 + 4 * rank
    if len(buf) < off:
        raise RawTensorError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 7)
    dt = DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - off != n * dt.itemsize:
        raise RawTensorError(f"payload is {len(buf) - off} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).copy()


def write(path, array):
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
