"""Bilateral smoothing and Laplacian (neighbourhood-difference) sharpening."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume import Stack


@dataclass(frozen=True)
class BilateralParams:
    sigma_s: float = 3.0
    sigma_r: float = 0.1
    radius: int | None = None

    def __post_init__(self):
        if not (self.sigma_s > 0 and self.sigma_r > 0):
            raise ValidationError("bilateral sigmas must be positive")
        if self.radius is not None and self.radius < 1:
            raise ValidationError("bilateral radius must be >= 1")

    @property
    def window_radius(self) -> int:
        if self.radius is not None:
            return self.radius
        return max(1, math.ceil(3.0 * self.sigma_s))


@dataclass(frozen=True)
class SharpenParams:
    strength: float = 1.0
    neighborhood: str = "eight"

    def __post_init__(self):
        if self.strength < 0:
            raise ValidationError("sharpening strength must be >= 0")
        if self.neighborhood not in ("four", "eight"):
            raise ValidationError(f"neighborhood must be 'four' or 'eight', got {self.neighborhood!r}")


def bilateral(image: np.ndarray, p: BilateralParams = BilateralParams()) -> np.ndarray:
    """Edge-preserving smoothing with a spatial and a range Gaussian.

    The window is a square of side ``2 * radius + 1``; coordinates outside the
    image are clamped to the nearest edge pixel.
    """
    image = np.asarray(image, dtype=np.float64)
    r = p.window_radius
    h, w = image.shape
    padded = np.pad(image, r, mode="edge")
    inv_s = 1.0 / (2.0 * p.sigma_s**2)
    inv_r = 1.0 / (2.0 * p.sigma_r**2)
    num = np.zeros_like(image)
    den = np.zeros_like(image)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = padded[r + dy:r + dy + h, r + dx:r + dx + w]
            diff = shifted - image
            wgt = math.exp(-(dx * dx + dy * dy) * inv_s) * np.exp(-(diff * diff) * inv_r)
            num += wgt * diff
            den += wgt
    # Accumulating differences from the centre keeps constant regions exact.
    return np.clip(image + num / den, 0.0, 1.0)


_OFFSETS = {
    "four": ((-1, 0), (1, 0), (0, -1), (0, 1)),
    "eight": tuple((dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)),
}


def neighbor_difference(image: np.ndarray, neighborhood: str = "eight") -> np.ndarray:
    """``I(p)`` minus the mean of its neighbours (centre excluded, edges replicated)."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    padded = np.pad(image, 1, mode="edge")
    offsets = _OFFSETS[neighborhood]
    acc = np.zeros_like(image)
    for dy, dx in offsets:
        acc += image - padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return acc / len(offsets)


def laplacian_sharpen(image: np.ndarray, p: SharpenParams = SharpenParams()) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if p.strength == 0:
        return image.copy()
    return np.clip(image + p.strength * neighbor_difference(image, p.neighborhood), 0.0, 1.0)


def _bilateral_slice(args):
    image, p = args
    return bilateral(image, p)


def _sharpen_slice(args):
    image, p = args
    return laplacian_sharpen(image, p)


def bilateral_stack(stack: Stack, p: BilateralParams = BilateralParams(), workers: int = 1) -> Stack:
    from .parallel import ordered_map

    out = ordered_map(_bilateral_slice, [(stack[z], p) for z in range(stack.depth)], workers)
    return Stack(np.stack(out), stack.dims)


def sharpen_stack(stack: Stack, p: SharpenParams = SharpenParams(), workers: int = 1) -> Stack:
    from .parallel import ordered_map

    out = ordered_map(_sharpen_slice, [(stack[z], p) for z in range(stack.depth)], workers)
    return Stack(np.stack(out), stack.dims)
