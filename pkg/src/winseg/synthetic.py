"""Synthetic feature bundles with planted ground truth.

Each class c gets the unit basis vector e_c as its text embedding; every
token whose patch lies in a class-c rectangle carries e_c rotated by a
random angle of at most ``spread`` radians. With spread 0 the pipeline must
recover the planted layout exactly, which makes these bundles the oracle
substrate for end-to-end tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_io
from .segmenter import MANIFEST_NAME, LabelMap, write_label_map
from .window_grid import GridSpec, WindowGrid, build_window_grid, token_pixel_box

GT_NAME = "gt.pgm"


@dataclass(frozen=True)
class Rect:
    y0: int
    x0: int
    y1: int
    x1: int
    class_index: int


@dataclass(frozen=True)
class SyntheticSpec:
    image_h: int
    image_w: int
    crop: int
    stride: int
    patch: int = 16
    num_classes: int = 4
    spread: float = 0.0  # max angular noise, radians
    seed: int = 0
    layout: list[Rect] = field(default_factory=list)  # empty -> auto grid layout

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        if self.spread < 0:
            raise ValueError(f"spread must be nonnegative, got {self.spread}")


def grid_layout(image_h: int, image_w: int, num_classes: int) -> list[Rect]:
    """Tile the image with a near-square grid of rectangles, one class each."""
    rows = int(np.floor(np.sqrt(num_classes)))
    cols = -(-num_classes // rows)
    ys = [round(image_h * r / rows) for r in range(rows + 1)]
    xs = [round(image_w * c / cols) for c in range(cols + 1)]
    rects = []
    for r in range(rows):
        for c in range(cols):
            cls = (r * cols + c) % num_classes
            rects.append(Rect(ys[r], xs[c], ys[r + 1], xs[c + 1], cls))
    return rects


def _validate_layout(rects: list[Rect], h: int, w: int, num_classes: int) -> None:
    paint = np.zeros((h, w), dtype=np.int32)
    for r in rects:
        if not (0 <= r.y0 < r.y1 <= h and 0 <= r.x0 < r.x1 <= w):
            raise ValueError(f"rectangle {r} outside the {h}x{w} image")
        if not 0 <= r.class_index < num_classes:
            raise ValueError(f"rectangle {r} uses class outside [0, {num_classes})")
        paint[r.y0 : r.y1, r.x0 : r.x1] += 1
    if paint.min() != 1 or paint.max() != 1:
        raise ValueError("layout rectangles must tile the image exactly")


def planted_labels(spec: SyntheticSpec) -> np.ndarray:
    rects = spec.layout or grid_layout(spec.image_h, spec.image_w, spec.num_classes)
    _validate_layout(rects, spec.image_h, spec.image_w, spec.num_classes)
    labels = np.zeros((spec.image_h, spec.image_w), dtype=np.uint16)
    for r in rects:
        labels[r.y0 : r.y1, r.x0 : r.x1] = r.class_index
    return labels


def _perturbed_basis_vector(cls: int, dim: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    e = np.zeros(dim, dtype=np.float64)
    e[cls] = 1.0
    if spread == 0.0:
        return e
    g = rng.standard_normal(dim)
    g -= g[cls] * e  # orthogonal complement of e
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return e
    theta = rng.uniform(0.0, spread)
    return np.cos(theta) * e + np.sin(theta) * (g / norm)


def token_class(grid: WindowGrid, labels: np.ndarray, window_idx: int, token_idx: int) -> int:
    """Class of the rectangle containing the token's patch center."""
    y0, x0, y1, x1 = token_pixel_box(grid, window_idx, token_idx)
    cy = min((y0 + y1) // 2, labels.shape[0] - 1)
    cx = min((x0 + x1) // 2, labels.shape[1] - 1)
    return int(labels[cy, cx])


def generate_bundle(spec: SyntheticSpec, out_dir) -> Path:
    """Write a bundle directory plus the planted ground truth map.

    Deterministic: the same spec (including seed) produces byte-identical
    files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gspec = GridSpec(spec.image_h, spec.image_w, spec.crop, spec.stride, spec.patch)
    grid = build_window_grid(gspec)
    labels = planted_labels(spec)
    rng = np.random.default_rng(spec.seed)
    dim = spec.num_classes
    n = grid.tokens_per_window

    window_entries = []
    for w in range(grid.num_windows):
        feats = np.empty((n, dim), dtype=np.float32)
        for t in range(n):
            cls = token_class(grid, labels, w, t)
            feats[t] = _perturbed_basis_vector(cls, dim, spec.spread, rng)
        vfm_name, val_name = f"win_{w}_vfm.glat", f"win_{w}_val.glat"
        tensor_io.write_tensor(feats, out / vfm_name)
        tensor_io.write_tensor(feats, out / val_name)
        window_entries.append({"vfm": vfm_name, "val": val_name})

    text = np.eye(dim, dtype=np.float32)
    tensor_io.write_tensor(text, out / "text.glat")
    tensor_io.write_tensor(np.eye(dim, dtype=np.float32), out / "proj_w.glat")
    tensor_io.write_tensor(np.zeros(dim, dtype=np.float32), out / "proj_b.glat")

    manifest = {
        "format": "feature-bundle/1",
        "setting": "synthetic",
        "mode": "vfm-features",
        "grid": {
            "image_h": spec.image_h,
            "image_w": spec.image_w,
            "crop": spec.crop,
            "stride": spec.stride,
            "patch": spec.patch,
        },
        "windows": [list(o) for o in grid.windows],
        "num_classes": spec.num_classes,
        "files": {
            "text": "text.glat",
            "proj_w": "proj_w.glat",
            "proj_b": "proj_b.glat",
            "windows": window_entries,
        },
        "classes": [
            {
                "name": f"class {c}",
                "class_index": c,
                "class_name": f"class {c}",
                "background": False,
            }
            for c in range(spec.num_classes)
        ],
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_label_map(LabelMap(labels), out / GT_NAME)
    return out
