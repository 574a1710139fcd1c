"""Cross-window attention numerics over precomputed token features.

A window's queries are feature rows from a vision backbone; keys and values
are pooled across every window so each query can attend beyond its own crop.
Queries may be replaced by proxy anchors (iterated means of high-similarity
tokens), and the similarity map is shifted and scaled either by fixed
constants or by scale-aware dynamic factors before masking and softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_io import l2_normalize_rows
from .window_grid import WindowGrid


@dataclass(frozen=True)
class TokenBank:
    """Per-window token features.

    vfm:    [L, N, D_v] backbone features, rows unit-norm (or zero).
    values: [L, N, D_c] value tokens aligned with vfm rows.
    """

    vfm: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.vfm.ndim != 3 or self.values.ndim != 3:
            raise ValueError("vfm and values must be [L, N, D] arrays")
        if self.vfm.shape[:2] != self.values.shape[:2]:
            raise ValueError(
                f"vfm {self.vfm.shape} and values {self.values.shape} disagree on [L, N]"
            )
        if self.num_windows < 1 or self.tokens_per_window < 1:
            raise ValueError("need at least one window and one token")
        norms = np.linalg.norm(self.vfm, axis=2)
        bad = np.abs(norms - 1.0) > 1e-5
        if np.any(bad & (norms > 1e-5)):
            raise ValueError("vfm rows must be unit-norm or zero")

    @property
    def num_windows(self) -> int:
        return self.vfm.shape[0]

    @property
    def tokens_per_window(self) -> int:
        return self.vfm.shape[1]


@dataclass(frozen=True)
class ProxyConfig:
    """Proxy anchor construction: cosine threshold, iterations, renorm flag."""

    rho: float = 0.6
    steps: int = 2
    renormalize: bool = True

    def __post_init__(self):
        if not -1.0 <= self.rho < 1.0:
            raise ValueError(f"rho must be in [-1, 1), got {self.rho}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass(frozen=True)
class NormConfig:
    """Similarity-map normalization, either fixed constants or dynamic."""

    mode: str = "dynamic"  # "fixed" | "dynamic"
    beta: float = 1.2
    gamma: float = 3.0
    lambda1: float = 0.3
    lambda2: float = 30.0

    def __post_init__(self):
        if self.mode not in ("fixed", "dynamic"):
            raise ValueError(f"mode must be 'fixed' or 'dynamic', got {self.mode!r}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be nonnegative")


@dataclass(frozen=True)
class ProxyState:
    """Per-query proxies plus the positive sets of the last threshold pass."""

    proxies: np.ndarray  # [N, D]
    positive_sets: list[np.ndarray]  # indices into the flattened global tokens
    positive_counts: np.ndarray = field(init=False)  # [N], each >= 1

    def __post_init__(self):
        counts = np.array([len(s) for s in self.positive_sets], dtype=np.int64)
        object.__setattr__(self, "positive_counts", counts)
        if len(self.positive_sets) != self.proxies.shape[0]:
            raise ValueError("one positive set per proxy row required")
        if np.any(counts < 1):
            raise ValueError("positive sets must be nonempty (fallback guarantees this)")


@dataclass(frozen=True)
class ProjectionHead:
    """Affine map applied after value aggregation: out = x @ weight + bias."""

    weight: np.ndarray  # [D_c, D_e]
    bias: np.ndarray  # [D_e]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("weight must be [D_c, D_e], bias [D_e]")
        if self.bias.shape[0] != self.weight.shape[1]:
            raise ValueError(
                f"bias {self.bias.shape} does not match weight {self.weight.shape}"
            )

    @staticmethod
    def identity(dim: int) -> "ProjectionHead":
        return ProjectionHead(np.eye(dim, dtype=np.float32), np.zeros(dim, np.float32))


def self_similarity(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Pairwise dot products: out[i, j] = q_i . k_j."""
    q = np.asarray(q, np.float32)
    k = np.asarray(k, np.float32)
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ValueError(f"inner dimensions disagree: {q.shape} vs {k.shape}")
    return q @ k.T


def extend_key_value(bank: TokenBank) -> tuple[np.ndarray, np.ndarray]:
    """Flatten [L, N, D] banks to global [L*N, D] keys and values.

    Rows [w*N, (w+1)*N) come from window w; this is a pure reshape.
    """
    ln = bank.num_windows * bank.tokens_per_window
    return bank.vfm.reshape(ln, -1), bank.values.reshape(ln, -1)


def smooth_queries(bank: TokenBank, grid: WindowGrid) -> np.ndarray:
    """Average each token with its in-window 8-neighborhood and with tokens
    at the same image position in overlapping windows, then renormalize.

    Border tokens use only the neighbors that exist. Windows whose token
    grids are not patch-aligned with each other contribute nothing across
    windows (their token centers never coincide).
    """
    n = grid.n_side
    L, N, d = bank.vfm.shape
    if N != n * n or L != grid.num_windows:
        raise ValueError(
            f"bank [{L}, {N}] does not match grid with {grid.num_windows} "
            f"windows of {n * n} tokens"
        )
    fields = bank.vfm.reshape(L, n, n, d).astype(np.float64)
    acc = fields.copy()
    cnt = np.ones((L, n, n, 1), dtype=np.float64)

    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ra, rb = max(0, -dy), n - max(0, dy)
            ca, cb = max(0, -dx), n - max(0, dx)
            if ra >= rb or ca >= cb:
                continue
            acc[:, ra:rb, ca:cb] += fields[:, ra + dy : rb + dy, ca + dx : cb + dx]
            cnt[:, ra:rb, ca:cb] += 1.0

    p = grid.spec.patch
    for w, (y0, x0) in enumerate(grid.windows):
        for w2, (y2, x2) in enumerate(grid.windows):
            if w2 == w:
                continue
            if (y0 - y2) % p or (x0 - x2) % p:
                continue
            oy, ox = (y0 - y2) // p, (x0 - x2) // p
            ra, rb = max(0, -oy), n - max(0, oy)
            ca, cb = max(0, -ox), n - max(0, ox)
            if ra >= rb or ca >= cb:
                continue
            acc[w, ra:rb, ca:cb] += fields[w2, ra + oy : rb + oy, ca + ox : cb + ox]
            cnt[w, ra:rb, ca:cb] += 1.0

    smoothed = (acc / cnt).reshape(L * N, d).astype(np.float32)
    return l2_normalize_rows(smoothed).reshape(L, N, d)


def _threshold_pass(
    queries: np.ndarray, k_global: np.ndarray, rho: float
) -> tuple[list[np.ndarray], np.ndarray]:
    sims = queries @ k_global.T
    hits = sims > rho
    sets = []
    for i in range(queries.shape[0]):
        idx = np.flatnonzero(hits[i])
        if idx.size == 0:
            idx = np.array([int(np.argmax(sims[i]))], dtype=np.int64)
        sets.append(idx)
    return sets, sims


def build_proxies(
    queries: np.ndarray, k_global: np.ndarray, cfg: ProxyConfig
) -> ProxyState:
    """Iteratively replace each query by the mean of its high-similarity tokens.

    Each step thresholds cosine similarity at rho (strict >) against the
    global keys, then averages the selected rows; an empty selection falls
    back to the single best-matching token so counts stay >= 1. With
    steps=0 the queries pass through and a single threshold pass still
    produces the positive sets.
    """
    q = np.asarray(queries, np.float32)
    k = np.asarray(k_global, np.float32)
    if cfg.steps == 0:
        sets, _ = _threshold_pass(q, k, cfg.rho)
        return ProxyState(q.copy(), sets)

    sets: list[np.ndarray] = []
    for _ in range(cfg.steps):
        sets, _ = _threshold_pass(q, k, cfg.rho)
        q = np.stack([k[idx].mean(axis=0) for idx in sets])
        if cfg.renormalize:
            q = l2_normalize_rows(q)
    return ProxyState(q, sets)


def fixed_normalize(s: np.ndarray, beta: float, gamma: float) -> np.ndarray:
    """Shift by beta times the whole-matrix mean, then scale by gamma."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    s = np.asarray(s, np.float32)
    return (gamma * (s - beta * s.mean())).astype(np.float32)


def dynamic_u(num_windows: int, lambda1: float) -> float:
    """Window-count dependent shift: 1 + lambda1 * ln(1 + L)."""
    if num_windows < 1:
        raise ValueError(f"window count must be >= 1, got {num_windows}")
    return 1.0 + lambda1 * float(np.log1p(num_windows))


def dynamic_w(positive_count: int, lambda2: float) -> float:
    """Positive-set dependent scale: 1 + lambda2 / |P|. Strictly decreasing in |P|."""
    if positive_count < 1:
        raise ValueError(f"positive count must be >= 1, got {positive_count}")
    return 1.0 + lambda2 / float(positive_count)


def dynamic_normalize(
    s_proxy: np.ndarray, state: ProxyState, num_windows: int, cfg: NormConfig
) -> np.ndarray:
    """Per-row shift by u times the row mean, per-row scale by w_i.

    Unlike the fixed path, the mean here is taken per query row.
    """
    if cfg.mode != "dynamic":
        raise ValueError("dynamic_normalize requires mode='dynamic'")
    s = np.asarray(s_proxy, np.float32)
    if s.shape[0] != state.positive_counts.shape[0]:
        raise ValueError(
            f"{s.shape[0]} similarity rows vs {state.positive_counts.shape[0]} proxies"
        )
    u = dynamic_u(num_windows, cfg.lambda1)
    w = (1.0 + cfg.lambda2 / state.positive_counts.astype(np.float64)).astype(np.float32)
    rowmean = s.mean(axis=1, keepdims=True)
    return (w[:, None] * (s - np.float32(u) * rowmean)).astype(np.float32)


def mask_and_softmax(a: np.ndarray) -> np.ndarray:
    """Row softmax over the nonnegative entries; negative entries get weight 0.

    A row with no nonnegative entry puts weight 1 on its maximum entry.
    """
    a = np.asarray(a, np.float32)
    keep = a >= 0
    any_kept = keep.any(axis=1)
    zmax = np.where(any_kept, np.max(np.where(keep, a, -np.inf), axis=1), 0.0)
    e = np.where(keep, np.exp(a - zmax[:, None], dtype=np.float32), 0.0)
    sums = e.sum(axis=1, keepdims=True)
    out = np.divide(e, sums, out=np.zeros_like(e), where=sums > 0)
    for i in np.flatnonzero(~any_kept):
        out[i, int(np.argmax(a[i]))] = 1.0
    return out.astype(np.float32)


def attend_and_project(
    attn: np.ndarray, v_global: np.ndarray, head: ProjectionHead
) -> np.ndarray:
    """Aggregate values under the attention weights and apply the head."""
    attn = np.asarray(attn, np.float32)
    v = np.asarray(v_global, np.float32)
    if attn.shape[1] != v.shape[0]:
        raise ValueError(f"attention {attn.shape} incompatible with values {v.shape}")
    if v.shape[1] != head.weight.shape[0]:
        raise ValueError(f"values {v.shape} incompatible with head {head.weight.shape}")
    return (attn @ v) @ head.weight + head.bias


def window_attention(
    bank: TokenBank,
    grid: WindowGrid,
    window_idx: int,
    proxy_cfg: ProxyConfig,
    norm_cfg: NormConfig,
    head: ProjectionHead,
    smoothing: bool = False,
) -> np.ndarray:
    """Full attention pipeline for one window, producing [N, D_e] visual tokens.

    Stages: optional query smoothing, proxy construction against the global
    keys, proxy-key similarity, fixed or dynamic normalization, masked
    softmax, value aggregation and projection.
    """
    if not 0 <= window_idx < bank.num_windows:
        raise IndexError(f"window index {window_idx} out of range")
    k_global, v_global = extend_key_value(bank)
    if smoothing:
        queries = smooth_queries(bank, grid)[window_idx]
    else:
        queries = bank.vfm[window_idx]
    state = build_proxies(queries, k_global, proxy_cfg)
    s_proxy = self_similarity(state.proxies, k_global)
    if norm_cfg.mode == "fixed":
        scores = fixed_normalize(s_proxy, norm_cfg.beta, norm_cfg.gamma)
    else:
        scores = dynamic_normalize(s_proxy, state, bank.num_windows, norm_cfg)
    attn = mask_and_softmax(scores)
    return attend_and_project(attn, v_global, head)
