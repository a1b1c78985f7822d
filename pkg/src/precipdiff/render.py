"""Per-frame images of transformed precipitation fields."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .condition import MISSING

MISSING_RGB = (128, 128, 128)
DRY_RGB = (255, 255, 255)
WET_RGB = (8, 48, 160)


def colorize(frame: np.ndarray) -> np.ndarray:
    """(H, W) values in [0, 1] to (H, W, 3) uint8, white to deep blue; -1 is gray.

    Row 0 of the field is the southernmost latitude, so rows are flipped to
    put north at the top of the image.
    """
    f = np.asarray(frame, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError(f"expected an (H, W) frame, got {f.shape}")
    missing = f == MISSING
    v = np.clip(np.where(missing, 0.0, f), 0.0, 1.0)[..., None]
    rgb = np.rint((1 - v) * np.array(DRY_RGB) + v * np.array(WET_RGB)).astype(np.uint8)
    rgb[missing] = MISSING_RGB
    return rgb[::-1]


def frame_images(field: np.ndarray) -> list[Image.Image]:
    """One RGB image of size W x H per frame of an (L, H, W) field."""
    field = np.asarray(field)
    if field.ndim != 3:
        raise ValueError(f"expected an (L, H, W) field, got {field.shape}")
    return [Image.fromarray(colorize(f), mode="RGB") for f in field]


def render_frames(field: np.ndarray, out_dir, stem: str = "frame") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(frame_images(field)):
        p = out_dir / f"{stem}_{i:03d}.png"
        tmp = p.with_name("." + p.name + ".tmp")
        img.save(tmp, format="PNG")
        tmp.replace(p)
        paths.append(p)
    return paths
