"""Sliding-window segmentation inference over precomputed token features."""

from .attention import (
    NormConfig,
    ProjectionHead,
    ProxyConfig,
    ProxyState,
    TokenBank,
    attend_and_project,
    build_proxies,
    dynamic_normalize,
    dynamic_u,
    dynamic_w,
    extend_key_value,
    fixed_normalize,
    mask_and_softmax,
    self_similarity,
    smooth_queries,
    window_attention,
)
from .metrics import BerReport, ConfusionMatrix, ber, miou
from .segmenter import (
    BundleError,
    FeatureBundle,
    LabelMap,
    SegmenterConfig,
    SegmentResult,
    apply_background,
    classify_tokens,
    collapse_subclasses,
    load_bundle,
    read_label_map,
    segment,
    write_label_map,
)
from .synthetic import Rect, SyntheticSpec, generate_bundle
from .tensor_io import l2_normalize_rows, read_tensor, write_tensor
from .window_grid import (
    GridSpec,
    LogitAccumulator,
    WindowGrid,
    boundary_pairs,
    build_window_grid,
    finalize,
    fuse_logits,
    token_pixel_box,
    upsample_window_logits,
)

__version__ = "0.1.0"
