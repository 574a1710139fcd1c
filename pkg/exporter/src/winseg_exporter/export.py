"""Export a feature bundle for one image.

The bundle directory layout (manifest.json, text.glat, proj_w.glat,
proj_b.glat, win_{k}_vfm.glat, win_{k}_val.glat) is the contract with the
segmentation engine; everything model-specific stays on this side.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from . import glat
from .geometry import resize_short_side, window_origins
from .models import (
    CLIP_MEAN,
    CLIP_STD,
    IMAGENET_MEAN,
    IMAGENET_STD,
    TEMPLATE_SETS,
    ClipEncoder,
    ModelLoadError,
    VfmEncoder,
    image_to_batch,
)
from .settings import Setting, resolve


@dataclass(frozen=True)
class ClassSpec:
    name: str
    prompts: list[str] = field(default_factory=list)  # extra aliases
    background: bool = False

    def all_prompts(self) -> list[str]:
        return [self.name, *self.prompts]


@dataclass
class ExportConfig:
    image: Path
    out_dir: Path
    classes: list[ClassSpec]
    setting: str = "sclip"
    clip_model: str = "openai/clip-vit-base-patch16"
    vfm_model: str = "facebook/dino-vitb8"
    templates: str = "single"
    device: str = "cpu"

    def resolved_setting(self) -> Setting:
        return resolve(self.setting)


def export(cfg: ExportConfig) -> Path:
    """Run both encoders over the resized image and write the bundle."""
    setting = cfg.resolved_setting()
    clip = ClipEncoder(cfg.clip_model, cfg.device)
    vfm = VfmEncoder(cfg.vfm_model, cfg.device)

    crop, stride = setting.crop, setting.stride
    if crop % clip.patch or crop % vfm.patch:
        raise ValueError(
            f"crop {crop} not divisible by patch sizes {clip.patch} (CLIP) "
            f"and {vfm.patch} (VFM)"
        )
    n_side = crop // clip.patch

    img = Image.open(cfg.image)
    new_w, new_h = resize_short_side(img.width, img.height, setting.resize_short)
    img = img.convert("RGB").resize((new_w, new_h), Image.BILINEAR)
    origins = window_origins(new_h, new_w, crop, stride)

    clip_batch = image_to_batch(img, origins, crop, CLIP_MEAN, CLIP_STD)
    vfm_batch = image_to_batch(img, origins, crop, IMAGENET_MEAN, IMAGENET_STD)
    values = clip.value_tokens(clip_batch)  # [L, N, D_c]
    feats = vfm.patch_features(vfm_batch, n_side)  # [L, N, D_v]
    proj_w, proj_b = clip.projection_head()

    prompts, prompt_rows = [], []
    for class_index, spec in enumerate(cfg.classes):
        for p in spec.all_prompts():
            prompts.append(p)
            prompt_rows.append(
                {
                    "name": p,
                    "class_index": class_index,
                    "class_name": spec.name,
                    "background": spec.background,
                }
            )
    text = clip.embed_prompts(prompts, TEMPLATE_SETS[cfg.templates])

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    window_entries = []
    for k in range(len(origins)):
        vfm_name, val_name = f"win_{k}_vfm.glat", f"win_{k}_val.glat"
        glat.write_tensor(feats[k], out / vfm_name)
        glat.write_tensor(values[k], out / val_name)
        window_entries.append({"vfm": vfm_name, "val": val_name})
    glat.write_tensor(text, out / "text.glat")
    glat.write_tensor(proj_w, out / "proj_w.glat")
    glat.write_tensor(proj_b, out / "proj_b.glat")

    manifest = {
        "format": "feature-bundle/1",
        "setting": cfg.setting,
        "mode": "vfm-features",
        "grid": {
            "image_h": new_h,
            "image_w": new_w,
            "crop": crop,
            "stride": stride,
            "patch": clip.patch,
        },
        "windows": [list(o) for o in origins],
        "num_classes": len(cfg.classes),
        "files": {
            "text": "text.glat",
            "proj_w": "proj_w.glat",
            "proj_b": "proj_b.glat",
            "windows": window_entries,
        },
        "classes": prompt_rows,
        "source": {
            "image": str(cfg.image),
            "clip_model": cfg.clip_model,
            "vfm_model": cfg.vfm_model,
            "vfm_pooling": vfm.patch // clip.patch if vfm.patch < clip.patch else 1,
            "proj_composition": "out_proj+post_layernorm_affine+visual_projection",
            "templates": cfg.templates,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _parse_classes(names: str, background: str | None, aliases: list[str]) -> list[ClassSpec]:
    alias_map: dict[str, list[str]] = {}
    for item in aliases:
        key, _, prompt = item.partition("=")
        if not prompt:
            raise ValueError(f"alias must look like class=prompt, got {item!r}")
        alias_map.setdefault(key.strip(), []).append(prompt.strip())
    specs = []
    for name in [n.strip() for n in names.split(",") if n.strip()]:
        specs.append(
            ClassSpec(
                name=name,
                prompts=alias_map.pop(name, []),
                background=(name == background),
            )
        )
    if alias_map:
        raise ValueError(f"aliases for unknown classes: {sorted(alias_map)}")
    if background is not None and not any(s.background for s in specs):
        raise ValueError(f"background class {background!r} not in class list")
    return specs


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="winseg-export", description=__doc__)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", required=True, help="comma-separated class names")
    p.add_argument("--background", help="class name to flag as background")
    p.add_argument("--alias", action="append", default=[],
                   help="extra prompt for a class, as class=prompt (repeatable)")
    p.add_argument("--setting", default="sclip",
                   choices=("sclip", "proxyclip", "clearclip", "clip-dinoiser"))
    p.add_argument("--clip", default="openai/clip-vit-base-patch16")
    p.add_argument("--vfm", default="facebook/dino-vitb8")
    p.add_argument("--templates", default="single", choices=sorted(TEMPLATE_SETS))
    p.add_argument("--device", default="cpu")
    args = p.parse_args(argv)
    try:
        cfg = ExportConfig(
            image=Path(args.image),
            out_dir=Path(args.out),
            classes=_parse_classes(args.classes, args.background, args.alias),
            setting=args.setting,
            clip_model=args.clip,
            vfm_model=args.vfm,
            templates=args.templates,
            device=args.device,
        )
        out = export(cfg)
    except (ModelLoadError, FileNotFoundError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"wrote    {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
