"""Synthetic EM-like stacks with exactly known axoplasmic-reticulum ground truth.

Everything is drawn from one PCG64 stream, read as raw 64-bit words and
converted to floats here, so output depends only on the config and the seed.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import ndimage

from .errors import GenerationError, ValidationError
from .volume import LabelVolume, Stack, VoxelDims

MAX_ATTEMPTS = 1000
DISK_GAP = 4.0  # min clear pixels between two placed disks (or a disk and a blob)


@dataclass(frozen=True)
class PhantomConfig:
    width: int = 256
    height: int = 256
    depth: int = 16
    background_mean: float = 0.6
    background_noise_sigma: float = 0.05
    noise_smooth_sigma: float = 2.0
    membrane_count: int = 12
    membrane_intensity: float = 0.2
    membrane_width: tuple[int, int] = (2, 4)
    membrane_length: tuple[float, float] = (40.0, 90.0)
    blob_count: int = 3
    blob_radius: tuple[float, float] = (15.0, 30.0)
    blob_intensity: float = 0.3
    ar_track_count: int = 30
    ar_radius: tuple[float, float] = (3.0, 8.0)
    ar_intensity: float = 0.15
    ar_span: tuple[int, int] = (3, 10)
    ar_jitter_max: float = 4.0
    distractor_count: int = 20
    borderline_count: int = 4
    borderline_intensity: float = 0.28
    isolation: float = 32.0
    rng_seed: int = 42

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        counts = ("membrane_count", "blob_count", "ar_track_count", "distractor_count", "borderline_count")
        if any(getattr(self, c) < 0 for c in counts):
            raise ValidationError("phantom counts must be >= 0")
        if self.width < 8 or self.height < 8 or self.depth < 1:
            raise ValidationError("phantom volume too small")
        lo, hi = self.ar_span
        if not 2 <= lo <= hi:
            raise ValidationError("ar_span must satisfy 2 <= min <= max")
        if self.ar_track_count and lo > self.depth:
            raise ValidationError("ar_span minimum exceeds stack depth")
        for name in ("membrane_width", "membrane_length", "blob_radius", "ar_radius"):
            a, b = getattr(self, name)
            if not 0 < a <= b:
                raise ValidationError(f"{name} must be an increasing positive range")
        if self.borderline_count > self.ar_track_count:
            raise ValidationError("borderline_count cannot exceed ar_track_count")

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


class PortableRNG:
    """Uniform, integer and normal variates derived from raw PCG64 words."""

    def __init__(self, seed: int):
        self._bits = np.random.PCG64(seed)

    def _raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size: int | None = None):
        u = (self._raw(1 if size is None else size) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u = lo + (hi - lo) * u
        return float(u[0]) if size is None else u

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]`` inclusive."""
        return lo + min(int(self.uniform() * (hi - lo + 1)), hi - lo)

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(size=m)  # (0, 1]
        u2 = self.uniform(size=m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integer(0, i)
            items[i], items[j] = items[j], items[i]
        return items


def disk_mask(shape, cx: float, cy: float, r: float) -> np.ndarray:
    """Pixels whose centres lie within ``r`` of ``(cx, cy)``."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


def polyline_mask(shape, vertices, width: float) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    out = np.zeros(shape, dtype=bool)
    half = width / 2.0
    for (ax, ay), (bx, by) in zip(vertices[:-1], vertices[1:]):
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / L2, 0.0, 1.0) if L2 > 0 else 0.0
        out |= (px - ax - t * dx) ** 2 + (py - ay - t * dy) ** 2 <= half * half
    return out


def _inside(x, y, margin, cfg):
    return margin <= x <= cfg.width - margin and margin <= y <= cfg.height - margin


def _place_membranes(cfg: PhantomConfig, rng: PortableRNG) -> list[dict]:
    out = []
    for k in range(cfg.membrane_count):
        width = rng.integer(*cfg.membrane_width)
        margin = width + 2.0
        for _ in range(MAX_ATTEMPTS):
            x, y = rng.uniform(margin, cfg.width - margin), rng.uniform(margin, cfg.height - margin)
            heading = rng.uniform(0, 2 * math.pi)
            total = rng.uniform(*cfg.membrane_length)
            verts = [(x, y)]
            for _ in range(3):
                heading += rng.uniform(-0.6, 0.6)
                x, y = x + total / 3 * math.cos(heading), y + total / 3 * math.sin(heading)
                verts.append((x, y))
            drift = [(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)) for _ in range(len(verts))]
            per_slice = [[(vx + z * ddx, vy + z * ddy) for (vx, vy), (ddx, ddy) in zip(verts, drift)]
                         for z in range(cfg.depth)]
            if all(_inside(vx, vy, margin, cfg) for vs in per_slice for vx, vy in vs):
                out.append({"id": k, "width": width, "vertices": per_slice})
                break
        else:
            raise GenerationError(f"could not place membrane {k} inside the slice bounds")
    return out


def _place_blobs(cfg: PhantomConfig, rng: PortableRNG) -> list[dict]:
    out = []
    for k in range(cfg.blob_count):
        for _ in range(MAX_ATTEMPTS):
            r = rng.uniform(*cfg.blob_radius)
            cx, cy = rng.uniform(r + 2, cfg.width - r - 2), rng.uniform(r + 2, cfg.height - r - 2)
            ddx, ddy = rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)
            path = [(cx + z * ddx, cy + z * ddy) for z in range(cfg.depth)]
            if all(_inside(x, y, r + 1, cfg) for x, y in path):
                out.append({"id": k, "radius": r, "centers": path})
                break
        else:
            raise GenerationError(f"could not place blob {k} inside the slice bounds")
    return out


class _Occupancy:
    """Per-slice placed disks and exclusion zones, for overlap and isolation tests."""

    def __init__(self, cfg: PhantomConfig, blobs):
        self.cfg = cfg
        self.disks: list[list[tuple[float, float, float]]] = [[] for _ in range(cfg.depth)]
        self.zones: list[list[tuple[float, float, float]]] = [[] for _ in range(cfg.depth)]
        self.blobs = blobs

    def clear(self, z, x, y, r, isolation_neighbors=False) -> bool:
        for ox, oy, orad in self.disks[z]:
            if math.hypot(x - ox, y - oy) < r + orad + DISK_GAP:
                return False
        for zx, zy, zr in self.zones[z]:
            if math.hypot(x - zx, y - zy) < zr + r:
                return False
        for b in self.blobs:
            bx, by = b["centers"][z]
            if math.hypot(x - bx, y - by) < r + b["radius"] + DISK_GAP:
                return False
        if isolation_neighbors:
            for zn in (z - 1, z + 1):
                if 0 <= zn < self.cfg.depth:
                    for ox, oy, orad in self.disks[zn]:
                        if math.hypot(x - ox, y - oy) < self.cfg.isolation + orad:
                            return False
        return True

    def isolated(self, z, x, y) -> bool:
        return all(math.hypot(x - ox, y - oy) >= self.cfg.isolation + orad for ox, oy, orad in self.disks[z])

    def add(self, z, x, y, r):
        self.disks[z].append((x, y, r))


def _window_clear(clutter, z, x, y, half) -> bool:
    ix, iy = int(x), int(y)
    return not clutter[z][max(0, iy - half):iy + half + 1, max(0, ix - half):ix + half + 1].any()


def _place_tracks(cfg: PhantomConfig, rng: PortableRNG, occ: _Occupancy, clutter) -> list[dict]:
    """Place AR tracks; the first ``borderline_count`` carry one faint interior slice.

    Faint slices and their neighbours sit in windows free of membranes, blobs and
    other disks, so a darkest-pixel search around a neighbouring detection can
    only land on the faint disk itself.
    """
    half = int(math.ceil(cfg.isolation / 2 + cfg.ar_jitter_max))
    tracks = []
    for k in range(cfg.ar_track_count):
        borderline = k < cfg.borderline_count
        lo = max(cfg.ar_span[0], 3) if borderline else cfg.ar_span[0]
        hi = min(cfg.ar_span[1], cfg.depth)
        if lo > hi:
            raise GenerationError(f"AR track {k + 1} needs a span of at least {lo} slices")
        for _ in range(MAX_ATTEMPTS):
            span = rng.integer(lo, hi)
            start = rng.integer(0, cfg.depth - span)
            r = rng.uniform(*cfg.ar_radius)
            margin = r + 4.0
            x, y = rng.uniform(margin, cfg.width - margin), rng.uniform(margin, cfg.height - margin)
            path = [(x, y)]
            for _ in range(span - 1):
                while True:
                    dx = rng.uniform(-cfg.ar_jitter_max, cfg.ar_jitter_max)
                    dy = rng.uniform(-cfg.ar_jitter_max, cfg.ar_jitter_max)
                    if dx * dx + dy * dy <= cfg.ar_jitter_max**2:
                        break
                x, y = x + dx, y + dy
                path.append((x, y))
            zs = list(range(start, start + span))
            if not all(_inside(px, py, margin, cfg) and occ.clear(z, px, py, r) for z, (px, py) in zip(zs, path)):
                continue
            faint = start + span // 2 if borderline else None
            if borderline:
                guarded = [(z, px, py) for z, (px, py) in zip(zs, path) if abs(z - faint) <= 1]
                if not all(_window_clear(clutter, z, px, py, half) and occ.isolated(z, px, py)
                           for z, px, py in guarded):
                    continue
                for z, px, py in guarded:
                    occ.zones[z].append((px, py, cfg.isolation))
            for z, (px, py) in zip(zs, path):
                occ.add(z, px, py, r)
            tracks.append({"label": k + 1, "radius": r, "start": start,
                           "slices": [{"z": z, "cx": px, "cy": py, "borderline": z == faint}
                                      for z, (px, py) in zip(zs, path)]})
            break
        else:
            what = "borderline AR track" if borderline else "AR track"
            raise GenerationError(f"could not place {what} {k + 1} without collisions")
    return tracks


def _place_distractors(cfg: PhantomConfig, rng: PortableRNG, occ: _Occupancy, first_label: int) -> list[dict]:
    out = []
    for k in range(cfg.distractor_count):
        for _ in range(MAX_ATTEMPTS):
            z = rng.integer(0, cfg.depth - 1)
            r = rng.uniform(*cfg.ar_radius)
            margin = r + 4.0
            x, y = rng.uniform(margin, cfg.width - margin), rng.uniform(margin, cfg.height - margin)
            if occ.clear(z, x, y, r, isolation_neighbors=True):
                occ.add(z, x, y, r)
                out.append({"label": first_label + k, "z": z, "cx": x, "cy": y, "radius": r})
                break
        else:
            raise GenerationError(f"could not place distractor {k + 1} isolated from neighbouring slices")
    return out


def _dark_clutter(cfg, membranes, blobs, z) -> np.ndarray:
    shape = (cfg.height, cfg.width)
    m = np.zeros(shape, dtype=bool)
    for mem in membranes:
        m |= polyline_mask(shape, mem["vertices"][z], mem["width"])
    for b in blobs:
        m |= disk_mask(shape, *b["centers"][z], b["radius"])
    return m


def generate_phantom(cfg: PhantomConfig = PhantomConfig()) -> tuple[Stack, LabelVolume, dict]:
    rng = PortableRNG(cfg.rng_seed)
    shape = (cfg.height, cfg.width)
    noise = np.stack([
        ndimage.gaussian_filter(rng.normal(shape) * cfg.background_noise_sigma, cfg.noise_smooth_sigma, mode="reflect")
        for _ in range(cfg.depth)
    ])
    membranes = _place_membranes(cfg, rng)
    blobs = _place_blobs(cfg, rng)
    clutter = [_dark_clutter(cfg, membranes, blobs, z) for z in range(cfg.depth)]
    occ = _Occupancy(cfg, blobs)
    tracks = _place_tracks(cfg, rng, occ, clutter)
    distractors = _place_distractors(cfg, rng, occ, cfg.ar_track_count + 1)
    borderline = [{"label": t["label"], "z": s["z"]} for t in tracks for s in t["slices"] if s["borderline"]]

    base = np.full((cfg.depth,) + shape, cfg.background_mean)
    labels = np.zeros((cfg.depth,) + shape, dtype=np.uint16)
    for z in range(cfg.depth):
        for mem in membranes:
            base[z][polyline_mask(shape, mem["vertices"][z], mem["width"])] = cfg.membrane_intensity
        for b in blobs:
            base[z][disk_mask(shape, *b["centers"][z], b["radius"])] = cfg.blob_intensity
    for t in tracks:
        for s in t["slices"]:
            m = disk_mask(shape, s["cx"], s["cy"], t["radius"])
            base[s["z"]][m] = cfg.borderline_intensity if s["borderline"] else cfg.ar_intensity
            labels[s["z"]][m] = t["label"]
    for d in distractors:
        m = disk_mask(shape, d["cx"], d["cy"], d["radius"])
        base[d["z"]][m] = cfg.ar_intensity
        labels[d["z"]][m] = d["label"]

    data = np.clip(base + noise, 0.0, 1.0)
    manifest = {
        "config": cfg.to_json(),
        "labels": {
            "ar": [t["label"] for t in tracks],
            "spurious": [d["label"] for d in distractors],
        },
        "tracks": [{"label": t["label"], "category": "ar", "radius": t["radius"],
                    "slices": [{"z": s["z"], "cx": s["cx"], "cy": s["cy"],
                                "borderline": s["borderline"]} for s in t["slices"]]}
                   for t in tracks],
        "distractors": [{**d, "category": "distractor", "spurious": True} for d in distractors],
        "borderline": borderline,
        "membranes": [{"id": m["id"], "category": "membrane", "width": m["width"],
                       "vertices": [[list(v) for v in vs] for vs in m["vertices"]]} for m in membranes],
        "blobs": [{"id": b["id"], "category": "blob", "radius": b["radius"],
                   "centers": [list(c) for c in b["centers"]]} for b in blobs],
    }
    return Stack(data, VoxelDims()), LabelVolume(labels), manifest
