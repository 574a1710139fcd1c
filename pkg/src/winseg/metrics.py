"""Segmentation quality metrics: mean IoU and the boundary error rate.

The boundary error rate measures prediction inconsistency across window
edges: among adjacent pixel pairs that straddle an interior window boundary
and share the same ground-truth label, it is the percentage predicted as
two different classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .segmenter import IGNORE_LABEL, LabelMap
from .window_grid import WindowGrid, boundary_pairs


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [C, C] uint64, rows = ground truth, cols = prediction
    ignore_label: int = IGNORE_LABEL

    @classmethod
    def empty(cls, num_classes: int, ignore_label: int = IGNORE_LABEL) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.uint64), ignore_label)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> None:
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        c = self.counts.shape[0]
        keep = gt != self.ignore_label
        g = gt[keep].astype(np.int64)
        p = pred[keep].astype(np.int64)
        if g.size and (g.min() < 0 or g.max() >= c or p.min() < 0 or p.max() >= c):
            raise ValueError(f"labels outside [0, {c}) encountered")
        binned = np.bincount(g * c + p, minlength=c * c).reshape(c, c)
        self.counts += binned.astype(np.uint64)

    def merge(self, other: "ConfusionMatrix") -> None:
        self.counts += other.counts


@dataclass(frozen=True)
class BerReport:
    same_gt_pairs: int  # denominator: boundary pairs with equal ground truth
    disagreeing_pairs: int  # numerator: of those, pairs predicted differently
    ber: float  # percentage
    zero_denominator: bool = False

    def to_dict(self) -> dict:
        return {
            "same_gt_pairs": self.same_gt_pairs,
            "disagreeing_pairs": self.disagreeing_pairs,
            "ber": self.ber,
            "zero_denominator": self.zero_denominator,
        }


def miou(
    pred: LabelMap, gt: LabelMap, num_classes: int
) -> tuple[np.ndarray, float]:
    """Per-class IoU (percent; NaN for classes absent from both maps) and
    their mean over the present classes, in percent."""
    if pred.labels.shape != gt.labels.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.labels.shape} vs gt {gt.labels.shape}"
        )
    cm = ConfusionMatrix.empty(num_classes, gt.ignore_label)
    cm.update(pred.labels, gt.labels)
    counts = cm.counts.astype(np.int64)
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = np.full(num_classes, np.nan, dtype=np.float64)
    kept = []
    for c in range(num_classes):
        if union[c] > 0:
            per_class[c] = 100.0 * (tp[c] / union[c])
            kept.append(per_class[c])
    if not kept:
        return per_class, float("nan")
    return per_class, sum(kept) / len(kept)


def ber(pred: LabelMap, gt: LabelMap, grid: WindowGrid) -> BerReport:
    """Boundary error rate over the grid's interior window edges.

    Pairs touching an ignore-label pixel are dropped from both sums. A zero
    denominator reports 0 with the flag set.
    """
    h, w = grid.spec.image_h, grid.spec.image_w
    if pred.labels.shape != (h, w) or gt.labels.shape != (h, w):
        raise ValueError(
            f"label maps {pred.labels.shape}/{gt.labels.shape} do not match grid {h}x{w}"
        )
    pairs = boundary_pairs(grid)
    if not pairs:
        return BerReport(0, 0, 0.0, zero_denominator=True)
    arr = np.asarray(pairs, dtype=np.int64)  # [P, 2, 2]
    py, px = arr[:, 0, 0], arr[:, 0, 1]
    qy, qx = arr[:, 1, 0], arr[:, 1, 1]
    gp, gq = gt.labels[py, px], gt.labels[qy, qx]
    valid = (gp != gt.ignore_label) & (gq != gt.ignore_label)
    same_gt = valid & (gp == gq)
    den = int(same_gt.sum())
    if den == 0:
        return BerReport(0, 0, 0.0, zero_denominator=True)
    pp, pq = pred.labels[py, px], pred.labels[qy, qx]
    num = int((same_gt & (pp != pq)).sum())
    return BerReport(den, num, 100.0 * num / den)


def iou_table(per_class: np.ndarray, mean: float, names: list[str] | None = None) -> str:
    """Aligned plain-text IoU table."""
    rows = []
    for c, v in enumerate(per_class):
        label = names[c] if names and c < len(names) else str(c)
        val = "absent" if np.isnan(v) else f"{v:.4f}"
        rows.append((label, val))
    width = max(len("class"), *(len(r[0]) for r in rows))
    lines = [f"{'class'.ljust(width)}  IoU%"]
    lines += [f"{label.ljust(width)}  {val}" for label, val in rows]
    lines.append(f"{'mIoU'.ljust(width)}  {mean:.4f}")
    return "\n".join(lines)


def miou_report(per_class: np.ndarray, mean: float) -> dict:
    return {
        "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
        "miou": None if np.isnan(mean) else float(mean),
    }
