"""End-to-end orchestration: feature bundle on disk -> fused label map.

A bundle directory holds ``manifest.json`` plus .glat tensors:

    manifest.json   geometry, class table, file map
    text.glat       [C_sub, D_e] unit-norm text embeddings, one row per prompt
    proj_w.glat     [D_c, D_e] projection weight
    proj_b.glat     [D_e] projection bias
    win_{k}_vfm.glat  [N, D_v] backbone features for window k
    win_{k}_val.glat  [N, D_c] value tokens for window k

Label maps are written as binary PGM (P5, maxval 255) when all values fit
in a byte, otherwise as a u16 variant of the tensor container (dtype
code 2, reserved for label maps; the float reader rejects it).
"""

from __future__ import annotations

import json
import struct
import time
import tracemalloc
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_io
from .attention import (
    NormConfig,
    ProjectionHead,
    ProxyConfig,
    TokenBank,
    window_attention,
)
from .window_grid import (
    GridSpec,
    GridSpecError,
    LogitAccumulator,
    WindowGrid,
    build_window_grid,
    finalize,
    fuse_logits,
    upsample_window_logits,
)

MANIFEST_NAME = "manifest.json"
IGNORE_LABEL = 255


class BundleError(ValueError):
    """Feature bundle failed validation; message names the offending part."""


@dataclass(frozen=True)
class ClassEntry:
    name: str  # prompt text for this row of text.glat
    class_index: int
    class_name: str = ""
    background: bool = False


@dataclass(frozen=True)
class SegmenterConfig:
    proxy: ProxyConfig = ProxyConfig()
    norm: NormConfig = NormConfig()
    smoothing: bool = False
    background_threshold: float | None = None
    logit_scale: float = 100.0
    collapse: str = "max"  # "max" | "mean" over prompt aliases
    threads: int = 1

    def __post_init__(self):
        if self.background_threshold is not None and not 0.0 <= self.background_threshold <= 1.0:
            raise ValueError(f"background threshold must be in [0, 1], got {self.background_threshold}")
        if self.logit_scale <= 0:
            raise ValueError(f"logit scale must be positive, got {self.logit_scale}")
        if self.collapse not in ("max", "mean"):
            raise ValueError(f"collapse must be 'max' or 'mean', got {self.collapse!r}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray  # [H, W] uint16
    ignore_label: int = IGNORE_LABEL

    def __post_init__(self):
        if self.labels.ndim != 2 or self.labels.dtype != np.uint16:
            raise ValueError("labels must be a 2-dim uint16 array")


@dataclass(frozen=True)
class FeatureBundle:
    root: Path
    grid: WindowGrid
    bank: TokenBank
    head: ProjectionHead
    text: np.ndarray  # [C_sub, D_e]
    classes: list[ClassEntry]
    num_classes: int
    background_index: int | None
    setting: str = "custom"
    mode: str = "vfm-features"


@dataclass
class SegmentResult:
    label_map: LabelMap
    fused_logits: np.ndarray  # [C, H, W] float32
    stats: dict = field(default_factory=dict)


def classify_tokens(f_visual: np.ndarray, f_text: np.ndarray, scale: float = 100.0) -> np.ndarray:
    """Scaled cosine similarity of each visual token against each prompt row."""
    f_visual = np.asarray(f_visual, np.float32)
    f_text = np.asarray(f_text, np.float32)
    if f_visual.ndim != 2 or f_text.ndim != 2 or f_visual.shape[1] != f_text.shape[1]:
        raise ValueError(f"embedding dims disagree: {f_visual.shape} vs {f_text.shape}")
    return np.float32(scale) * (tensor_io.l2_normalize_rows(f_visual) @ f_text.T)


def collapse_subclasses(
    sub_logits: np.ndarray,
    classes: list[ClassEntry],
    num_classes: int,
    how: str = "max",
) -> np.ndarray:
    """Reduce per-prompt logits [N, C_sub] to per-class logits [N, C].

    Multiple prompts may alias one class; the class logit is their max
    (or mean). A class without any prompt is an error.
    """
    sub = np.asarray(sub_logits, np.float32)
    if sub.shape[1] != len(classes):
        raise ValueError(f"{sub.shape[1]} logit columns for {len(classes)} prompts")
    out = np.empty((sub.shape[0], num_classes), dtype=np.float32)
    for c in range(num_classes):
        cols = [i for i, e in enumerate(classes) if e.class_index == c]
        if not cols:
            raise BundleError(f"class {c} has no prompt")
        block = sub[:, cols]
        out[:, c] = block.max(axis=1) if how == "max" else block.mean(axis=1)
    return out


def apply_background(
    probs: np.ndarray, threshold: float | None, background_index: int | None
) -> np.ndarray:
    """Pick a class index per position from probabilities [C, ...].

    With a threshold and a background class: positions whose best
    non-background probability falls below the threshold get the
    background index, others the best non-background class. Without a
    threshold this is a plain argmax. Ties go to the lowest class index.
    """
    probs = np.asarray(probs)
    if threshold is None or background_index is None:
        return np.argmax(probs, axis=0)
    nonbg = np.array([c for c in range(probs.shape[0]) if c != background_index])
    if nonbg.size == 0:
        return np.full(probs.shape[1:], background_index, dtype=np.int64)
    sub = probs[nonbg]
    best = nonbg[np.argmax(sub, axis=0)]
    return np.where(sub.max(axis=0) < threshold, background_index, best)


def softmax_classes(logits: np.ndarray) -> np.ndarray:
    """Softmax over axis 0 of [C, ...] logits."""
    z = np.asarray(logits, np.float32)
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _window_paths(manifest: dict, root: Path) -> list[tuple[Path, Path]]:
    entries = manifest["files"]["windows"]
    return [(root / e["vfm"], root / e["val"]) for e in entries]


def load_bundle(path) -> FeatureBundle:
    """Read and validate a feature bundle directory."""
    root = Path(path)
    mpath = root / MANIFEST_NAME
    if not root.is_dir() or not mpath.is_file():
        raise FileNotFoundError(f"bundle not found: {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise BundleError(f"manifest.json is not valid JSON: {e}") from e

    try:
        g = manifest["grid"]
        spec = GridSpec(
            image_h=int(g["image_h"]),
            image_w=int(g["image_w"]),
            crop=int(g["crop"]),
            stride=int(g["stride"]),
            patch=int(g["patch"]),
        )
    except KeyError as e:
        raise BundleError(f"manifest grid is missing field {e}") from e
    except GridSpecError as e:
        raise BundleError(f"manifest grid invalid: {e}") from e

    grid = build_window_grid(spec)
    try:
        wpaths = _window_paths(manifest, root)
    except KeyError as e:
        raise BundleError(f"manifest files table is missing {e}") from e
    if len(wpaths) != grid.num_windows:
        raise BundleError(
            f"manifest lists {len(wpaths)} windows but the grid has {grid.num_windows}"
        )
    if "windows" in manifest:
        declared = [tuple(o) for o in manifest["windows"]]
        if declared != grid.windows:
            raise BundleError("manifest window origins disagree with the grid")

    num_classes = int(manifest["num_classes"])
    classes = [
        ClassEntry(
            name=e["name"],
            class_index=int(e["class_index"]),
            class_name=e.get("class_name", e["name"]),
            background=bool(e.get("background", False)),
        )
        for e in manifest["classes"]
    ]
    if not classes:
        raise BundleError("manifest declares no classes")
    for e in classes:
        if not 0 <= e.class_index < num_classes:
            raise BundleError(f"prompt {e.name!r} maps to class {e.class_index} outside [0, {num_classes})")
    covered = {e.class_index for e in classes}
    missing = sorted(set(range(num_classes)) - covered)
    if missing:
        raise BundleError(f"classes without any prompt: {missing}")
    bg = sorted({e.class_index for e in classes if e.background})
    if len(bg) > 1:
        raise BundleError(f"multiple background classes: {bg}")
    background_index = bg[0] if bg else None

    text = tensor_io.read_tensor(root / manifest["files"]["text"])
    if text.ndim != 2 or text.shape[0] != len(classes):
        raise BundleError(f"text embeddings {text.shape} do not match {len(classes)} prompts")
    tn = np.linalg.norm(text, axis=1)
    if np.any(np.abs(tn - 1.0) > 1e-5):
        raise BundleError("text embedding rows must be unit-norm")

    proj_w = tensor_io.read_tensor(root / manifest["files"]["proj_w"])
    proj_b = tensor_io.read_tensor(root / manifest["files"]["proj_b"])
    try:
        head = ProjectionHead(proj_w, proj_b)
    except ValueError as e:
        raise BundleError(f"projection head invalid: {e}") from e
    if proj_w.shape[1] != text.shape[1]:
        raise BundleError(
            f"projection output dim {proj_w.shape[1]} does not match text dim {text.shape[1]}"
        )

    n_tokens = grid.tokens_per_window
    vfms, vals = [], []
    for k, (vf_path, va_path) in enumerate(wpaths):
        vf = tensor_io.read_tensor(vf_path)
        va = tensor_io.read_tensor(va_path)
        if vf.ndim != 2 or vf.shape[0] != n_tokens:
            raise BundleError(f"window {k}: vfm tensor {vf.shape}, expected [{n_tokens}, D_v]")
        if va.ndim != 2 or va.shape[0] != n_tokens:
            raise BundleError(f"window {k}: value tensor {va.shape}, expected [{n_tokens}, D_c]")
        if va.shape[1] != proj_w.shape[0]:
            raise BundleError(
                f"window {k}: value dim {va.shape[1]} does not match projection input {proj_w.shape[0]}"
            )
        vfms.append(vf)
        vals.append(va)
    try:
        bank = TokenBank(np.stack(vfms), np.stack(vals))
    except ValueError as e:
        raise BundleError(f"token bank invalid: {e}") from e

    return FeatureBundle(
        root=root,
        grid=grid,
        bank=bank,
        head=head,
        text=text,
        classes=classes,
        num_classes=num_classes,
        background_index=background_index,
        setting=manifest.get("setting", "custom"),
        mode=manifest.get("mode", "vfm-features"),
    )


def segment(bundle: FeatureBundle, cfg: SegmenterConfig = SegmenterConfig()) -> SegmentResult:
    """Run the per-window attention + classification pipeline and fuse.

    Windows may be processed concurrently; accumulation always happens in
    grid order, so the result is independent of scheduling.
    """
    grid = bundle.grid
    spec = grid.spec
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    else:
        tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    t0 = time.perf_counter()

    def per_window(idx: int) -> np.ndarray:
        try:
            f_visual = window_attention(
                bundle.bank, grid, idx, cfg.proxy, cfg.norm, bundle.head, cfg.smoothing
            )
            sub = classify_tokens(f_visual, bundle.text, cfg.logit_scale)
            cls = collapse_subclasses(sub, bundle.classes, bundle.num_classes, cfg.collapse)
            return upsample_window_logits(cls, grid)
        except Exception as e:
            raise RuntimeError(f"window {idx}: {e}") from e

    acc = LogitAccumulator(bundle.num_classes, spec.image_h, spec.image_w)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for idx, up in enumerate(pool.map(per_window, range(grid.num_windows))):
                fuse_logits(acc, up, grid.windows[idx])
    else:
        for idx in range(grid.num_windows):
            fuse_logits(acc, per_window(idx), grid.windows[idx])

    fused = finalize(acc)
    probs = softmax_classes(fused)
    labels = apply_background(probs, cfg.background_threshold, bundle.background_index)
    elapsed = time.perf_counter() - t0
    peak = max(tracemalloc.get_traced_memory()[1] - base, 0)
    if started:
        tracemalloc.stop()

    lm = LabelMap(labels.astype(np.uint16))
    stats = {
        "windows": grid.num_windows,
        "tokens_per_window": grid.tokens_per_window,
        "seconds": elapsed,
        "peak_bytes": int(peak),
    }
    return SegmentResult(lm, fused, stats)


# ---------------------------------------------------------------------------
# label map files


_U16_DTYPE_CODE = 2


def write_label_map(lm: LabelMap, path) -> None:
    labels = lm.labels
    if labels.max(initial=0) <= 255:
        h, w = labels.shape
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (w, h))
            f.write(labels.astype(np.uint8).tobytes(order="C"))
        return
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", tensor_io.MAGIC, tensor_io.VERSION, _U16_DTYPE_CODE, 2))
        f.write(struct.pack("<2Q", *labels.shape))
        f.write(np.ascontiguousarray(labels, dtype="<u2").tobytes(order="C"))


def read_label_map(path, ignore_label: int = IGNORE_LABEL) -> LabelMap:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] == tensor_io.MAGIC:
        magic, version, dtype, ndim = struct.unpack_from("<4sIII", blob, 0)
        if version != tensor_io.VERSION or dtype != _U16_DTYPE_CODE or ndim != 2:
            raise tensor_io.TensorFormatError(
                f"not a label map container (version {version}, dtype {dtype})", "dtype"
            )
        h, w = struct.unpack_from("<2Q", blob, 16)
        data = np.frombuffer(blob, dtype="<u2", count=h * w, offset=32)
        return LabelMap(data.reshape(h, w).astype(np.uint16), ignore_label)
    if blob[:2] != b"P5":
        raise ValueError(f"{path}: neither PGM nor label-map container")
    # strip comments, then magic/width/height/maxval tokens precede the raster
    header: list[bytes] = []
    pos = 2
    while len(header) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        header.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = int(header[0]), int(header[1]), int(header[2])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PGM maxval {maxval}")
    data = np.frombuffer(blob, dtype=np.uint8, count=h * w, offset=pos)
    return LabelMap(data.reshape(h, w).astype(np.uint16), ignore_label)
