"""ATSR tensor files: b"ATSR", u32 rank, u32 extents, float32 payload (all little-endian)."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ATSR"


class FormatError(ValueError):
    pass


def to_bytes(array) -> bytes:
    arr = np.require(np.asarray(array, dtype="<f4"), requirements="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError("bad magic, not an ATSR blob")
    (rank,) = struct.unpack_from("<I", blob, 4)
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(blob) - offset != 4 * count:
        raise FormatError(f"payload length {len(blob) - offset} does not match shape {shape}")
    return np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)


def save(path, array) -> None:
    Path(path).write_bytes(to_bytes(array))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())
