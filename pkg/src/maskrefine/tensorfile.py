"""Portable binary tensor interchange format.

Layout (little-endian throughout):

    bytes 0..3   magic "G4TN"
    byte  4      format version, currently 1
    byte  5      rank (0..8)
    bytes 6..7   reserved, zero
    next         rank x u32 dims
    payload      prod(dims) x float32, row-major

The payload is always float32 on the wire regardless of in-memory
dtype; write followed by read is bit-exact for float32 data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"G4TN"
VERSION = 1
MAX_RANK = 8


class TensorFileError(ValueError):
    """Malformed tensor file: bad magic/version, truncation, bad rank."""


def write_tensor(arr: np.ndarray) -> bytes:
    """Serialize an array to the interchange format."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim > MAX_RANK:
        raise TensorFileError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    header = MAGIC + struct.pack("<BBH", VERSION, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + arr.tobytes(order="C")


def read_tensor(blob: bytes) -> np.ndarray:
    """Parse the interchange format back into a float32 array."""
    if len(blob) < 8:
        raise TensorFileError("truncated header")
    if blob[:4] != MAGIC:
        raise TensorFileError(f"bad magic {blob[:4]!r}")
    version, rank, reserved = struct.unpack("<BBH", blob[4:8])
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if rank > MAX_RANK:
        raise TensorFileError(f"rank {rank} exceeds maximum {MAX_RANK}")
    if reserved != 0:
        raise TensorFileError("reserved bytes must be zero")
    dims_end = 8 + 4 * rank
    if len(blob) < dims_end:
        raise TensorFileError("truncated dims")
    dims = struct.unpack(f"<{rank}I", blob[8:dims_end])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = blob[dims_end:]
    if len(payload) < 4 * count:
        raise TensorFileError(
            f"truncated payload: need {4 * count} bytes, have {len(payload)}"
        )
    if len(payload) > 4 * count:
        raise TensorFileError("trailing bytes after payload")
    arr = np.frombuffer(payload, dtype="<f4", count=count).reshape(dims)
    return arr.astype(np.float32, copy=True)


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(write_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    return read_tensor(Path(path).read_bytes())
