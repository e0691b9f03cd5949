"""Seeded region growing with shape/size/intensity priors."""
from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass, fields

import numpy as np

from .errors import ValidationError
from .volume import AnnotationSet, Region, RegionStats, Stack, region_stats

STRICT = "strict"
RELAXED = "relaxed"

# Rejection reasons, in the order the criteria are checked.
SIZE = "size"
CIRCULARITY = "shape-circularity"
ASPECT = "shape-aspect"
CONTRAST = "color-contrast"
OVERSIZE = "oversize"

_NEIGHBOURS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class DetectParams:
    t_seed: float = 0.25
    r_min: int = 2
    t_grow: float = 0.08
    t_grow_relaxed: float = 0.12
    a_cap: int = 2000
    a_min: int = 20
    a_max: int = 900
    c_min: float = 0.5
    c_min_relaxed: float = 0.35
    aspect_max: float = 2.5
    contrast_min: float = 0.05
    ring_width: int = 3
    merge_dist: float = 5.0
    merge_overlap: float = 0.5

    def __post_init__(self):
        checks = [
            (0 < self.t_seed < 1, "0 < t_seed < 1"),
            (self.r_min >= 0, "r_min >= 0"),
            (0 <= self.t_grow < self.t_grow_relaxed, "0 <= t_grow < t_grow_relaxed"),
            (1 <= self.a_min < self.a_max <= self.a_cap, "a_min < a_max <= a_cap"),
            (0 < self.c_min_relaxed <= self.c_min <= 1, "0 < c_min_relaxed <= c_min <= 1"),
            (self.aspect_max >= 1, "aspect_max >= 1"),
            (self.ring_width >= 1, "ring_width >= 1"),
            (self.merge_dist >= 0, "merge_dist >= 0"),
            (0 < self.merge_overlap <= 1, "0 < merge_overlap <= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(f"invalid detection parameters: need {msg}")

    def replace(self, **kw) -> "DetectParams":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return DetectParams(**d)


@dataclass(frozen=True)
class Decision:
    accepted: bool
    reason: str | None
    stats: RegionStats


def find_seeds(image: np.ndarray, p: DetectParams = DetectParams()) -> list[tuple[int, int]]:
    """Dark local minima, as ``(y, x)`` pairs sorted row-major.

    A pixel qualifies when it is at most ``t_seed`` and no other pixel in its
    ``(2*r_min+1)``-square window is darker or equally dark with a smaller
    ``(y, x)``.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    r = p.r_min
    cand = image <= p.t_seed
    if r > 0 and cand.any():
        padded = np.pad(image, r, mode="constant", constant_values=np.inf)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if dy == 0 and dx == 0:
                    continue
                other = padded[r + dy:r + dy + h, r + dx:r + dx + w]
                # A neighbour that precedes us in (y, x) order wins ties.
                if (dy, dx) < (0, 0):
                    cand &= other > image
                else:
                    cand &= other >= image
    ys, xs = np.nonzero(cand)
    return list(zip(ys.tolist(), xs.tolist()))


def runs_from_pixels(pixels) -> tuple[tuple[int, int, int], ...]:
    runs = []
    for y, x in sorted(pixels):
        if runs and runs[-1][0] == y and runs[-1][2] == x:
            runs[-1][2] = x + 1
        else:
            runs.append([y, x, x + 1])
    return tuple(tuple(r) for r in runs)


def grow_region(image: np.ndarray, seed: tuple[int, int], p: DetectParams = DetectParams(),
                mode: str = STRICT, z: int = 0) -> Region | None:
    """Breadth-first 8-connected growth from ``seed = (y, x)``.

    A pixel joins when its intensity is at most the seed intensity plus the
    mode's tolerance.  Returns ``None`` (oversize) as soon as the region grows
    past ``a_cap`` pixels.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    sy, sx = seed
    if not (0 <= sy < h and 0 <= sx < w):
        raise ValidationError(f"seed {seed} outside {w}x{h} slice")
    tol = p.t_grow if mode == STRICT else p.t_grow_relaxed
    limit = image[sy, sx] + tol
    visited = np.zeros((h, w), dtype=bool)
    visited[sy, sx] = True
    members = [(sy, sx)]
    frontier = deque(members)
    while frontier:
        y, x = frontier.popleft()
        for dy, dx in _NEIGHBOURS:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and not visited[ny, nx]:
                visited[ny, nx] = True
                if image[ny, nx] <= limit:
                    members.append((ny, nx))
                    if len(members) > p.a_cap:
                        return None
                    frontier.append((ny, nx))
    return Region(z, runs_from_pixels(members))


def accept_region(region: Region, image: np.ndarray, p: DetectParams = DetectParams(),
                  mode: str = STRICT) -> Decision:
    st = region_stats(region, image, p.ring_width)
    c_min = p.c_min if mode == STRICT else p.c_min_relaxed
    if not p.a_min <= st.area_px <= p.a_max:
        return Decision(False, SIZE, st)
    if st.circularity < c_min:
        return Decision(False, CIRCULARITY, st)
    if st.aspect > p.aspect_max:
        return Decision(False, ASPECT, st)
    if not st.contrast >= p.contrast_min:
        return Decision(False, CONTRAST, st)
    return Decision(True, None, st)


def _variant_pass(grow_image, stats_image, p, z, log):
    seeds = find_seeds(grow_image, p)
    log["seeds"] += len(seeds)
    claimed = np.zeros(grow_image.shape, dtype=bool)
    accepted = []
    for seed in seeds:
        if claimed[seed]:
            log["suppressed"] += 1
            continue
        region = grow_region(grow_image, seed, p, STRICT, z)
        if region is None:
            log["rejected"][OVERSIZE] += 1
            continue
        ys, xs = region.pixels()
        if claimed[ys, xs].any():
            log["suppressed"] += 1
            continue
        claimed[ys, xs] = True
        log["grown"] += 1
        decision = accept_region(region, stats_image, p, STRICT)
        if decision.accepted:
            accepted.append((region, decision.stats.centroid))
        else:
            log["rejected"][decision.reason] += 1
    log["accepted"] += len(accepted)
    return accepted


def is_duplicate(a: Region, a_centroid, b: Region, b_centroid, p: DetectParams, shape) -> bool:
    if math.dist(a_centroid, b_centroid) <= p.merge_dist:
        return True
    inter = int((a.mask(shape) & b.mask(shape)).sum())
    return inter >= p.merge_overlap * min(a.area, b.area)


def merge_into(kept: list, candidates: list, p: DetectParams, shape) -> tuple[list, int, int]:
    """Add non-duplicate, non-overlapping ``(region, centroid)`` candidates to ``kept``.

    Returns the new list plus counts of duplicates and overlap rejections.
    """
    kept = list(kept)
    occupied = np.zeros(shape, dtype=bool)
    for r, _ in kept:
        ys, xs = r.pixels()
        occupied[ys, xs] = True
    dups = overlaps = 0
    for region, centroid in candidates:
        if any(is_duplicate(region, centroid, k, kc, p, shape) for k, kc in kept):
            dups += 1
            continue
        ys, xs = region.pixels()
        if occupied[ys, xs].any():
            overlaps += 1
            continue
        occupied[ys, xs] = True
        kept.append((region, centroid))
    return kept, dups, overlaps


def _new_log():
    return {"seeds": 0, "suppressed": 0, "grown": 0, "accepted": 0, "rejected": Counter()}


def detect_slice(bilateral_image: np.ndarray, sharpened_image: np.ndarray, p: DetectParams = DetectParams(),
                 z: int = 0) -> tuple[list[Region], dict]:
    logs = {"bilateral": _new_log(), "sharpened": _new_log()}
    from_bilateral = _variant_pass(bilateral_image, bilateral_image, p, z, logs["bilateral"])
    from_sharpened = _variant_pass(sharpened_image, bilateral_image, p, z, logs["sharpened"])
    merged, dups, overlaps = merge_into(from_bilateral, from_sharpened, p, bilateral_image.shape)
    for v in logs.values():
        v["rejected"] = {k: v["rejected"][k] for k in sorted(v["rejected"])}
    entry = {"z": z, **logs, "merged_duplicates": dups, "merge_overlap_dropped": overlaps,
             "regions": len(merged)}
    return [r for r, _ in merged], entry


def _detect_job(args):
    bil, sharp, p, z = args
    return detect_slice(bil, sharp, p, z)


def detect_stack(stack_bilateral: Stack, stack_sharpened: Stack, p: DetectParams = DetectParams(),
                 workers: int = 1) -> tuple[AnnotationSet, dict]:
    """Detect on both filter variants of every slice and merge the results."""
    from .parallel import ordered_map

    if stack_bilateral.shape != stack_sharpened.shape:
        raise ValidationError(f"filtered stacks differ in shape: {stack_bilateral.shape} vs {stack_sharpened.shape}")
    jobs = [(stack_bilateral[z], stack_sharpened[z], p, z) for z in range(stack_bilateral.depth)]
    results = ordered_map(_detect_job, jobs, workers)
    regions = [r for rs, _ in results for r in rs]
    log = {"slices": [entry for _, entry in results], "total_regions": len(regions)}
    return AnnotationSet(*stack_bilateral.shape, regions), log
