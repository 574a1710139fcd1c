"""Minimal writer/reader for the .glat float32 tensor container.

Layout: magic "GLAT", u32 version=1, u32 dtype=0 (float32), u32 ndim,
ndim x u64 dims, then row-major little-endian float32 payload. This is the
interchange format the segmentation engine consumes; it is reimplemented
here so the engine and the exporter stay independently testable.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GLAT"


def write_tensor(arr: np.ndarray, path) -> None:
    a = np.ascontiguousarray(arr, dtype=np.float32)
    if not 1 <= a.ndim <= 4:
        raise ValueError(f"ndim must be 1..4, got {a.ndim}")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", MAGIC, 1, 0, a.ndim))
        f.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        f.write(a.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, version, dtype, ndim = struct.unpack("<4sIII", f.read(16))
        if magic != MAGIC or version != 1 or dtype != 0:
            raise ValueError(f"{path}: not a float32 .glat file")
        shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 0
        data = np.frombuffer(f.read(4 * count), dtype="<f4", count=count)
    return data.reshape(shape).copy()
