"""NST1 tensor files.

Layout: ``b"NST1"``, u8 dtype code, u8 ndim, ndim x u32 extents, then the
row-major payload. Every multi-byte field is little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NST1"

_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1")}
_BY_KIND = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.uint8): 3}


class FormatError(ValueError):
    """Malformed NST or checkpoint bytes."""

    def __init__(self, msg: str, offset: int | None = None, source: str | None = None):
        where = "" if offset is None else f" at byte {offset}"
        src = "" if source is None else f" in {source}"
        super().__init__(f"{msg}{where}{src}")
        self.offset = offset


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _BY_KIND.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise TypeError(f"NST supports float32, float64 and uint8, not {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions for NST")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()
    return head + payload


def decode(buf: bytes, offset: int = 0, source: str | None = None) -> tuple[np.ndarray, int]:
    """Parse one tensor starting at ``offset``; return it and the end offset."""
    if len(buf) < offset + 6:
        raise FormatError("truncated header", len(buf), source)
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[offset:offset + 4])!r}", offset, source)
    code, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", offset + 4, source)
    pos = offset + 6
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated extents", len(buf), source)
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dt = _CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - pos}",
                          len(buf), source)
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True), pos + nbytes


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    arr, end = decode(buf, 0, source=str(path))
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes", end, str(path))
    return arr
