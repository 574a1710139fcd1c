"""Independent reference implementations used to cross-check the library.

Everything here is written with plain loops and separate numpy routes on
purpose; none of it calls into winseg.
"""

from __future__ import annotations

import math

import numpy as np


def baseline_attention(
    feats: np.ndarray,
    values: np.ndarray,
    beta: float,
    gamma: float,
    weight: np.ndarray,
    bias: np.ndarray,
) -> np.ndarray:
    """Single-window reference: self-similarity of the features, global-mean
    shift and scale, nonnegativity mask, row softmax, value aggregation,
    affine projection."""
    q = np.asarray(feats, np.float64)
    s = np.einsum("id,jd->ij", q, q)
    a = gamma * (s - beta * (s.sum() / s.size))
    n, m = a.shape
    attn = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        kept = [j for j in range(m) if a[i, j] >= 0.0]
        if not kept:
            attn[i, int(np.argmax(a[i]))] = 1.0
            continue
        top = max(a[i, j] for j in kept)
        exps = {j: math.exp(a[i, j] - top) for j in kept}
        z = sum(exps.values())
        for j, e in exps.items():
            attn[i, j] = e / z
    agg = np.einsum("im,md->id", attn, np.asarray(values, np.float64))
    return np.einsum("id,de->ie", agg, np.asarray(weight, np.float64)) + np.asarray(
        bias, np.float64
    )


def proxy_iteration(
    queries: np.ndarray,
    k_global: np.ndarray,
    rho: float,
    steps: int,
    renormalize: bool,
) -> tuple[np.ndarray, list[list[int]], float]:
    """Loop-based proxy construction.

    Returns (proxies, positive sets, margin) where margin is the smallest
    |dot - rho| seen across every threshold decision; fixtures with a tiny
    margin are ambiguous under float32 arithmetic and should be redrawn.
    """
    m = k_global.shape[0]
    d = k_global.shape[1]
    proxies = []
    sets: list[list[int]] = []
    margin = float("inf")

    for qi in np.asarray(queries, np.float64):
        q = list(qi)
        last_set: list[int] = []
        if steps == 0:
            dots = [sum(q[t] * float(k_global[j, t]) for t in range(d)) for j in range(m)]
            margin = min(margin, min(abs(x - rho) for x in dots))
            last_set = [j for j in range(m) if dots[j] > rho]
            if not last_set:
                last_set = [max(range(m), key=lambda j: dots[j])]
            proxies.append(q)
            sets.append(last_set)
            continue
        for _ in range(steps):
            dots = [sum(q[t] * float(k_global[j, t]) for t in range(d)) for j in range(m)]
            margin = min(margin, min(abs(x - rho) for x in dots))
            last_set = [j for j in range(m) if dots[j] > rho]
            if not last_set:
                last_set = [max(range(m), key=lambda j: dots[j])]
            q = [
                sum(float(k_global[j, t]) for j in last_set) / len(last_set)
                for t in range(d)
            ]
            if renormalize:
                norm = math.sqrt(sum(x * x for x in q))
                if norm > 0:
                    q = [x / norm for x in q]
        proxies.append(q)
        sets.append(last_set)
    return np.array(proxies), sets, margin


def smooth_tokens(
    vfm: np.ndarray, origins: list[tuple[int, int]], n_side: int, patch: int
) -> np.ndarray:
    """Loop-based neighborhood + overlap smoothing with renormalization."""
    L, N, d = vfm.shape
    position = {}
    for w, (y0, x0) in enumerate(origins):
        for t in range(N):
            r, c = divmod(t, n_side)
            position.setdefault((y0 + r * patch, x0 + c * patch), []).append((w, t))
    out = np.empty_like(vfm, dtype=np.float64)
    for w, (y0, x0) in enumerate(origins):
        for t in range(N):
            r, c = divmod(t, n_side)
            members = [vfm[w, t].astype(np.float64)]
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    if dr == dc == 0:
                        continue
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < n_side and 0 <= cc < n_side:
                        members.append(vfm[w, rr * n_side + cc].astype(np.float64))
            for w2, t2 in position[(y0 + r * patch, x0 + c * patch)]:
                if w2 != w:
                    members.append(vfm[w2, t2].astype(np.float64))
            mean = sum(members) / len(members)
            norm = math.sqrt(float(sum(x * x for x in mean)))
            out[w, t] = mean / norm if norm > 0 else mean
    return out.astype(np.float32)


def miou_by_counting(
    pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore: int = 255
) -> tuple[list[float], float]:
    """Per-pixel counting mIoU, percentages; absent classes are skipped."""
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    h, w = gt.shape
    for y in range(h):
        for x in range(w):
            g, p = int(gt[y, x]), int(pred[y, x])
            if g == ignore:
                continue
            if g == p:
                tp[g] += 1
            else:
                fp[p] += 1
                fn[g] += 1
    per_class = []
    kept = []
    for c in range(num_classes):
        union = tp[c] + fp[c] + fn[c]
        if union == 0:
            per_class.append(float("nan"))
        else:
            v = 100.0 * (tp[c] / union)
            per_class.append(v)
            kept.append(v)
    mean = sum(kept) / len(kept) if kept else float("nan")
    return per_class, mean


def boundary_edges(origins: list[tuple[int, int]], crop: int, h: int, w: int):
    """Interior window edge coordinates, computed the slow way."""
    cols = set()
    rows = set()
    for y0, x0 in origins:
        for x in (x0, min(x0 + crop, w)):
            if 0 < x < w:
                cols.add(x)
        for y in (y0, min(y0 + crop, h)):
            if 0 < y < h:
                rows.add(y)
    return rows, cols


def ber_by_counting(
    pred: np.ndarray,
    gt: np.ndarray,
    origins: list[tuple[int, int]],
    crop: int,
    ignore: int = 255,
) -> tuple[int, int, float]:
    """Brute-force boundary error rate: scan every adjacent pixel pair and
    keep the ones separated by an interior window edge."""
    h, w = gt.shape
    rows, cols = boundary_edges(origins, crop, h, w)
    den = num = 0
    for y in range(h):
        for x in range(w):
            for (y2, x2) in ((y, x + 1), (y + 1, x)):
                if y2 >= h or x2 >= w:
                    continue
                straddles = (x2 == x + 1 and x2 in cols) or (y2 == y + 1 and y2 in rows)
                if not straddles:
                    continue
                g1, g2 = int(gt[y, x]), int(gt[y2, x2])
                if g1 == ignore or g2 == ignore or g1 != g2:
                    continue
                den += 1
                if int(pred[y, x]) != int(pred[y2, x2]):
                    num += 1
    return den, num, (100.0 * num / den) if den else 0.0
