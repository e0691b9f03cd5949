"""Burn region boundaries and track tints into RGB slice images."""
from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import IOFailure
from .volume import AnnotationSet, Stack

UNTRACKED = (255, 40, 40)
TINT = 0.35


def track_color(track_id: int | None) -> tuple[int, int, int]:
    if track_id is None:
        return UNTRACKED
    hue = (track_id * 0.618033988749895) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 1.0)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def render_overlay(image: np.ndarray, regions) -> np.ndarray:
    gray = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    for r in regions:
        m = r.mask(image.shape)
        color = np.asarray(track_color(r.track_id), dtype=np.float64)
        rgb[m] = (1 - TINT) * rgb[m] + TINT * color
        edge = m & ~ndimage.binary_erosion(m, border_value=0)
        rgb[edge] = color
    return np.rint(rgb).astype(np.uint8)


def save_overlays(stack: Stack, aset: AnnotationSet, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for z in range(stack.depth):
        try:
            Image.fromarray(render_overlay(stack[z], aset.on(z)), mode="RGB").save(out / f"overlay_z{z:04d}.png")
        except OSError as exc:
            raise IOFailure(f"cannot write overlay for slice {z}: {exc}") from exc
