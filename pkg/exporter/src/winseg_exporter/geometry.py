"""Resize bookkeeping and the sliding-window origin grid."""

from __future__ import annotations

import math


def resize_short_side(width: int, height: int, target: int) -> tuple[int, int]:
    """New (width, height) with the short side scaled to ``target``,
    aspect ratio kept, the long side rounded half-up."""
    scale = target / min(width, height)
    return int(width * scale + 0.5), int(height * scale + 0.5)


def axis_origins(dim: int, crop: int, stride: int) -> list[int]:
    """Window origins along one axis: stride steps, last origin pulled back
    so the window ends exactly at the image border."""
    if dim <= crop:
        return [0]
    n = max(math.ceil((dim - crop) / stride), 0) + 1
    return [min(i * stride, dim - crop) for i in range(n)]


def window_origins(height: int, width: int, crop: int, stride: int) -> list[tuple[int, int]]:
    """(y0, x0) origins, row-major."""
    return [
        (y, x)
        for y in axis_origins(height, crop, stride)
        for x in axis_origins(width, crop, stride)
    ]
