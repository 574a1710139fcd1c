"""Dense float32 tensors and their bit-exact binary container.

The on-disk container (extension ``.glat``) is deliberately tiny:

    magic    4 bytes   b"GLAT"
    version  u32 LE    1
    dtype    u32 LE    0 = float32 (other codes reserved)
    ndim     u32 LE    1..4
    dims     ndim * u64 LE
    payload  row-major little-endian float32, 4 * prod(dims) bytes

All integers are little-endian. Tensors round-trip bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"GLAT"
VERSION = 1
DTYPE_F32 = 0

_HEADER = struct.Struct("<4sIII")


class TensorFormatError(ValueError):
    """Malformed .glat file. ``field`` names the offending header field."""

    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class BadMagicError(TensorFormatError):
    def __init__(self, got: bytes):
        super().__init__(f"bad magic {got!r}, expected {MAGIC!r}", "magic")
        self.got = got


class UnsupportedVersionError(TensorFormatError):
    def __init__(self, got: int):
        super().__init__(f"unsupported version {got}, expected {VERSION}", "version")
        self.got = got


class UnsupportedDtypeError(TensorFormatError):
    def __init__(self, got: int):
        super().__init__(f"unsupported dtype code {got}, expected {DTYPE_F32}", "dtype")
        self.got = got


class BadShapeError(TensorFormatError):
    def __init__(self, message: str):
        super().__init__(message, "dims")


class TruncatedPayloadError(TensorFormatError):
    def __init__(self, expected: int, got: int):
        super().__init__(
            f"truncated payload: expected {expected} bytes, got {got}", "payload"
        )
        self.expected = expected
        self.got = got


def _check_shape(shape: tuple[int, ...]) -> None:
    if not 1 <= len(shape) <= 4:
        raise BadShapeError(f"ndim must be 1..4, got {len(shape)}")
    if any(d < 0 for d in shape):
        raise BadShapeError(f"negative extent in shape {shape}")


def write_tensor(t: np.ndarray, path) -> None:
    """Serialize a float32 tensor to ``path`` in the .glat layout."""
    arr = np.ascontiguousarray(t, dtype=np.float32)
    _check_shape(arr.shape)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, DTYPE_F32, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Parse a .glat file back into a float32 array.

    Raises BadMagicError, UnsupportedVersionError, UnsupportedDtypeError,
    BadShapeError or TruncatedPayloadError on malformed input.
    """
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TruncatedPayloadError(_HEADER.size, len(head))
        magic, version, dtype, ndim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise BadMagicError(magic)
        if version != VERSION:
            raise UnsupportedVersionError(version)
        if dtype != DTYPE_F32:
            raise UnsupportedDtypeError(dtype)
        if not 1 <= ndim <= 4:
            raise BadShapeError(f"ndim must be 1..4, got {ndim}")
        dims_raw = f.read(8 * ndim)
        if len(dims_raw) < 8 * ndim:
            raise BadShapeError("truncated dims block")
        shape = struct.unpack(f"<{ndim}Q", dims_raw)
        count = 1
        for d in shape:
            count *= d
        payload = f.read(4 * count + 1)  # over-read one byte to detect trailing junk
        if len(payload) < 4 * count:
            raise TruncatedPayloadError(4 * count, len(payload))
        arr = np.frombuffer(payload[: 4 * count], dtype="<f4").reshape(shape)
    return np.ascontiguousarray(arr, dtype=np.float32)


def l2_normalize_rows(t: np.ndarray, eps: float = 0.0) -> np.ndarray:
    """Scale every row of an [n, d] matrix to unit Euclidean norm.

    Zero rows pass through unchanged so padded or degenerate tokens
    never abort inference.
    """
    arr = np.asarray(t, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-dim input, got shape {arr.shape}")
    norms = np.linalg.norm(arr.astype(np.float64), axis=1, keepdims=True)
    safe = np.where(norms > eps, norms, 1.0)
    return (arr / safe).astype(np.float32)
