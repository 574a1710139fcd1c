"""Named inference settings: short-side resize target, crop and stride.

These mirror the evaluation protocols of the common training-free
segmentation baselines so exported bundles reproduce their geometry.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class Setting:
    resize_short: int
    crop: int
    stride: int


SETTINGS = {
    "sclip": Setting(resize_short=336, crop=224, stride=112),
    "proxyclip": Setting(resize_short=336, crop=336, stride=112),
    "clearclip": Setting(resize_short=448, crop=448, stride=224),
    "clip-dinoiser": Setting(resize_short=448, crop=448, stride=224),
}


def resolve(name: str) -> Setting:
    try:
        return SETTINGS[name]
    except KeyError:
        raise ValueError(f"unknown setting {name!r}; choose from {sorted(SETTINGS)}") from None
