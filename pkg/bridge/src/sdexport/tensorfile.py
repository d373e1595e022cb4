"""Writer/reader for the portable tensor interchange format.

Independent implementation of the format the refinement engine
consumes: magic "G4TN", version byte 1, rank byte, two reserved zero
bytes, little-endian u32 dims, then float32 payload in row-major
order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"G4TN"
VERSION = 1
MAX_RANK = 8


class TensorFileError(ValueError):
    pass


def write_tensor(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim > MAX_RANK:
        raise TensorFileError(f"rank {arr.ndim} exceeds maximum {MAX_RANK}")
    return (MAGIC + struct.pack("<BBH", VERSION, arr.ndim, 0)
            + struct.pack(f"<{arr.ndim}I", *arr.shape)
            + arr.tobytes(order="C"))


def read_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise TensorFileError("bad magic")
    version, rank, reserved = struct.unpack("<BBH", blob[4:8])
    if version != VERSION or reserved != 0:
        raise TensorFileError(f"unsupported header (version {version})")
    if rank > MAX_RANK:
        raise TensorFileError(f"rank {rank} exceeds maximum {MAX_RANK}")
    end = 8 + 4 * rank
    dims = struct.unpack(f"<{rank}I", blob[8:end])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - end != 4 * count:
        raise TensorFileError("payload size mismatch")
    return np.frombuffer(blob[end:], dtype="<f4", count=count).reshape(dims).copy()


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(write_tensor(arr))


def load_tensor(path: str | Path) -> np.ndarray:
    return read_tensor(Path(path).read_bytes())
