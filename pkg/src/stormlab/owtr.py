"""OWTR binary tensor files.

Layout: magic ``OWTR``, u16 LE version (=1), u8 dtype code (1 = 32-bit
little-endian real), u8 ndim, ndim u32 LE extents, then the row-major
float32 payload. Every tensor that crosses a process or module boundary
travels in this format.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"OWTR"
VERSION = 1
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sHBB")


class OwtrError(Exception):
    """Malformed or truncated OWTR file."""


def write_tensor(path, array) -> None:
    """Write ``array`` to ``path`` as float32 OWTR."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 255:
        raise OwtrError(f"ndim {arr.ndim} does not fit the u8 header field")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Read an OWTR file back into a float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise OwtrError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, dtype, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise OwtrError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise OwtrError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_F32:
        raise OwtrError(f"{path}: unsupported dtype code {dtype}")
    off = _HEADER.size
    if len(raw) < off + 4 * ndim:
        raise OwtrError(f"{path}: truncated shape block")
    shape = struct.unpack_from(f"<{ndim}I", raw, off)
    off += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    expected = off + 4 * count
    if len(raw) != expected:
        raise OwtrError(
            f"{path}: payload is {len(raw) - off} bytes, expected {4 * count}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
    return data.reshape(shape).copy()
