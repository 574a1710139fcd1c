"""Sliding-window tiling, token geometry and overlap-averaged logit fusion.

The tiling convention is the clamped grid used by the common segmentation
toolchains: ``ceil((dim - crop) / stride) + 1`` windows per axis, with the
last origin pulled back to ``dim - crop`` so every window stays inside the
image. When ``crop`` exceeds an image dimension the grid degenerates to a
single row or column with origins at 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GridSpecError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Geometry of the tiling: image size, square crop, stride, patch side."""

    image_h: int
    image_w: int
    crop: int
    stride: int
    patch: int = 16

    def __post_init__(self):
        if self.image_h <= 0 or self.image_w <= 0:
            raise GridSpecError(f"image size must be positive, got {self.image_h}x{self.image_w}")
        if self.stride <= 0:
            raise GridSpecError(f"stride must be positive, got {self.stride}")
        if self.stride > self.crop:
            raise GridSpecError(f"stride {self.stride} exceeds crop {self.crop}")
        if self.crop > max(self.image_h, self.image_w):
            raise GridSpecError(
                f"crop {self.crop} exceeds both image dimensions "
                f"{self.image_h}x{self.image_w}"
            )
        if self.patch <= 0 or self.crop % self.patch != 0:
            raise GridSpecError(f"crop {self.crop} not divisible by patch {self.patch}")


@dataclass(frozen=True)
class WindowGrid:
    spec: GridSpec
    windows: list[tuple[int, int]]  # (y0, x0) origins, row-major
    n_side: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_side", self.spec.crop // self.spec.patch)

    @property
    def num_windows(self) -> int:
        return len(self.windows)

    @property
    def tokens_per_window(self) -> int:
        return self.n_side * self.n_side


def _axis_origins(dim: int, crop: int, stride: int) -> list[int]:
    if dim <= crop:
        return [0]
    n = max(math.ceil((dim - crop) / stride), 0) + 1
    return [min(i * stride, dim - crop) for i in range(n)]


def build_window_grid(spec: GridSpec) -> WindowGrid:
    """Enumerate window origins row-major by (y0, x0)."""
    ys = _axis_origins(spec.image_h, spec.crop, spec.stride)
    xs = _axis_origins(spec.image_w, spec.crop, spec.stride)
    return WindowGrid(spec, [(y, x) for y in ys for x in xs])


def token_pixel_box(grid: WindowGrid, window_idx: int, token_idx: int) -> tuple[int, int, int, int]:
    """Pixel rectangle (y0, x0, y1, x1), half-open, covered by one token."""
    if not 0 <= window_idx < grid.num_windows:
        raise IndexError(f"window index {window_idx} out of range [0, {grid.num_windows})")
    if not 0 <= token_idx < grid.tokens_per_window:
        raise IndexError(f"token index {token_idx} out of range [0, {grid.tokens_per_window})")
    wy, wx = grid.windows[window_idx]
    r, c = divmod(token_idx, grid.n_side)
    p = grid.spec.patch
    return (wy + r * p, wx + c * p, wy + (r + 1) * p, wx + (c + 1) * p)


def _bilinear_axis(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel (align_corners=false) source coordinates, clamped at borders
    src = (np.arange(n_dst, dtype=np.float64) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1)
    lo = np.floor(src).astype(np.int64)
    lo = np.minimum(lo, n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    return lo, hi, (src - lo).astype(np.float32)


def upsample_window_logits(tok_logits: np.ndarray, grid: WindowGrid) -> np.ndarray:
    """Bilinearly resize per-token logits [N, C] to pixel logits [C, crop, crop].

    Uses the lerp form ``v0 + w * (v1 - v0)`` so constant fields stay exact.
    """
    n = grid.n_side
    tok = np.asarray(tok_logits, dtype=np.float32)
    if tok.ndim != 2 or tok.shape[0] != n * n:
        raise ValueError(f"expected [{n * n}, C] token logits, got {tok.shape}")
    crop = grid.spec.crop
    planes = tok.reshape(n, n, -1)
    ylo, yhi, wy = _bilinear_axis(n, crop)
    xlo, xhi, wx = _bilinear_axis(n, crop)
    rows = planes[ylo] + wy[:, None, None] * (planes[yhi] - planes[ylo])
    out = rows[:, xlo] + wx[None, :, None] * (rows[:, xhi] - rows[:, xlo])
    return np.ascontiguousarray(out.transpose(2, 0, 1))


class LogitAccumulator:
    """Running per-pixel sum and coverage count for overlap averaging.

    Sums are kept in float64 so that identical constants fuse back to the
    constant bit-exactly and window order cannot leak into the result.
    """

    def __init__(self, num_classes: int, image_h: int, image_w: int):
        self.sum = np.zeros((num_classes, image_h, image_w), dtype=np.float64)
        self.count = np.zeros((1, image_h, image_w), dtype=np.float64)

    def add(self, window_logits: np.ndarray, origin: tuple[int, int]) -> None:
        fuse_logits(self, window_logits, origin)


def fuse_logits(acc: LogitAccumulator, window_logits: np.ndarray, origin: tuple[int, int]) -> LogitAccumulator:
    """Accumulate one window's [C, crop, crop] logits at pixel ``origin``."""
    c, h, w = acc.sum.shape[0], acc.sum.shape[1], acc.sum.shape[2]
    wl = np.asarray(window_logits)
    if wl.ndim != 3 or wl.shape[0] != c:
        raise ValueError(f"expected [{c}, crop, crop] window logits, got {wl.shape}")
    y0, x0 = origin
    if y0 < 0 or x0 < 0 or y0 >= h or x0 >= w:
        raise ValueError(f"origin {origin} outside {h}x{w} image")
    y1 = min(y0 + wl.shape[1], h)
    x1 = min(x0 + wl.shape[2], w)
    acc.sum[:, y0:y1, x0:x1] += wl[:, : y1 - y0, : x1 - x0]
    acc.count[:, y0:y1, x0:x1] += 1.0
    return acc


def finalize(acc: LogitAccumulator) -> np.ndarray:
    """Per-pixel mean over contributing windows, as float32 [C, H, W]."""
    if not np.all(acc.count >= 1.0):
        raise ValueError("uncovered pixels: every pixel needs at least one window")
    return (acc.sum / acc.count).astype(np.float32)


def boundary_pairs(grid: WindowGrid) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Adjacent pixel pairs straddling interior window edges, deduplicated.

    A vertical edge at column x (0 < x < W) contributes ((y, x-1), (y, x))
    for every row y; horizontal edges contribute the transposed pairs.
    """
    h, w, crop = grid.spec.image_h, grid.spec.image_w, grid.spec.crop
    xs, ys = set(), set()
    for y0, x0 in grid.windows:
        for x in (x0, min(x0 + crop, w)):
            if 0 < x < w:
                xs.add(x)
        for y in (y0, min(y0 + crop, h)):
            if 0 < y < h:
                ys.add(y)
    pairs = []
    for x in sorted(xs):
        pairs.extend((((y, x - 1), (y, x))) for y in range(h))
    for y in sorted(ys):
        pairs.extend((((y - 1, x), (y, x))) for x in range(w))
    return pairs
