"""Model wrappers: CLIP value-token extraction, projection-head composition,
prompt-ensembled text embeddings, and VFM patch features.

Models are loaded through transformers from a local directory or hub id;
only frozen forward passes are used.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image
from transformers import AutoModel, AutoTokenizer, CLIPModel

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

TEMPLATE_SETS = {
    "single": ["a photo of a {}."],
    "ensemble": [
        "itap of a {}.",
        "a bad photo of the {}.",
        "a origami {}.",
        "a photo of the large {}.",
        "a {} in a video game.",
        "art of the {}.",
        "a photo of the small {}.",
    ],
}


class ModelLoadError(RuntimeError):
    pass


def image_to_batch(img: Image.Image, origins, crop: int, mean, std) -> torch.Tensor:
    """Crop every window and stack into a normalized [L, 3, crop, crop] batch."""
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    h, w = arr.shape[:2]
    crops = []
    for y0, x0 in origins:
        y1, x1 = min(y0 + crop, h), min(x0 + crop, w)
        tile = np.zeros((crop, crop, 3), dtype=np.float32)
        tile[: y1 - y0, : x1 - x0] = arr[y0:y1, x0:x1]
        crops.append(tile)
    batch = np.stack(crops).transpose(0, 3, 1, 2)
    batch = (batch - np.array(mean, np.float32)[:, None, None]) / np.array(std, np.float32)[:, None, None]
    return torch.from_numpy(batch)


def _pooled_to_tensor(out):
    # transformers >= 5 returns the full output object from get_text_features
    return out if torch.is_tensor(out) else out.pooler_output


class ClipEncoder:
    """Frozen CLIP: last-block value tokens, composed projection, text tower."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
            self.tokenizer = AutoTokenizer.from_pretrained(model_id)
        except Exception as e:
            raise ModelLoadError(f"cannot load CLIP from {model_id!r}: {e}") from e
        self.device = device
        self.patch = int(self.model.config.vision_config.patch_size)

    @torch.no_grad()
    def value_tokens(self, pixels: torch.Tensor) -> np.ndarray:
        """Value tokens of the final vision block, CLS dropped: [L, N, D_c]."""
        layer = self.model.vision_model.encoder.layers[-1]
        captured = {}

        def pre_hook(_mod, args, kwargs):
            captured["h"] = args[0] if args else kwargs["hidden_states"]

        handle = layer.register_forward_pre_hook(pre_hook, with_kwargs=True)
        try:
            self.model.vision_model(pixels.to(self.device), interpolate_pos_encoding=True)
        finally:
            handle.remove()
        values = layer.self_attn.v_proj(layer.layer_norm1(captured["h"]))
        return values[:, 1:, :].cpu().numpy().astype(np.float32)

    def projection_head(self) -> tuple[np.ndarray, np.ndarray]:
        """Single affine map standing in for the post-attention projection.

        Composes the last block's output projection, the elementwise affine
        part of the final layer norm, and the visual projection. The layer
        norm's data-dependent whitening cannot be folded into an affine map
        and is skipped; the manifest records this composition.
        """
        layer = self.model.vision_model.encoder.layers[-1]
        w_o = layer.self_attn.out_proj.weight.detach()
        b_o = layer.self_attn.out_proj.bias.detach()
        gamma = self.model.vision_model.post_layernorm.weight.detach()
        beta = self.model.vision_model.post_layernorm.bias.detach()
        w_v = self.model.visual_projection.weight.detach()
        weight = (w_o.T * gamma.unsqueeze(0)) @ w_v.T
        bias = (b_o * gamma + beta) @ w_v.T
        return (
            weight.cpu().numpy().astype(np.float32),
            bias.cpu().numpy().astype(np.float32),
        )

    @torch.no_grad()
    def embed_prompts(self, prompts: list[str], templates: list[str]) -> np.ndarray:
        """One unit-norm row per prompt: the mean text embedding over the
        template ensemble."""
        rows = []
        for prompt in prompts:
            texts = [t.format(prompt) for t in templates]
            enc = self.tokenizer(texts, padding=True, return_tensors="pt").to(self.device)
            feats = _pooled_to_tensor(self.model.get_text_features(**enc))
            feats = feats / feats.norm(dim=-1, keepdim=True)
            mean = feats.mean(dim=0)
            rows.append(mean / mean.norm())
        return torch.stack(rows).cpu().numpy().astype(np.float32)


class VfmEncoder:
    """Frozen vision foundation model producing per-patch key features."""

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            self.model = AutoModel.from_pretrained(model_id).to(device).eval()
        except Exception as e:
            raise ModelLoadError(f"cannot load VFM from {model_id!r}: {e}") from e
        self.device = device
        self.patch = int(self.model.config.patch_size)

    @torch.no_grad()
    def patch_features(self, pixels: torch.Tensor, n_side: int) -> np.ndarray:
        """L2-normalized patch features pooled onto an n_side x n_side grid.

        A VFM with a finer patch than the target grid (e.g. patch 8 against
        CLIP's 16) is reconciled by average-pooling blocks of its tokens.
        """
        out = self.model(pixels.to(self.device), interpolate_pos_encoding=True)
        tokens = out.last_hidden_state[:, 1:, :]
        L, n_tok, d = tokens.shape
        side = int(round(n_tok**0.5))
        if side * side != n_tok:
            raise ValueError(f"non-square token grid from VFM: {n_tok} tokens")
        if side % n_side != 0:
            raise ValueError(
                f"VFM token grid {side}x{side} does not pool onto {n_side}x{n_side}"
            )
        ratio = side // n_side
        grid = tokens.reshape(L, n_side, ratio, n_side, ratio, d)
        pooled = grid.mean(dim=(2, 4)).reshape(L, n_side * n_side, d)
        pooled = pooled / pooled.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return pooled.cpu().numpy().astype(np.float32)
