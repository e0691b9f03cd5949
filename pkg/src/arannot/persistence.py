"""Cross-slice persistence check: recover, filter, and link detections into tracks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .detect import RELAXED, DetectParams, accept_region, grow_region, merge_into
from .errors import ValidationError
from .volume import EIGHT, RECOVERED, AnnotationSet, Region, Stack


@dataclass(frozen=True)
class PersistParams:
    d_max: float = 15.0
    require_overlap: bool = False

    def __post_init__(self):
        if not self.d_max > 0:
            raise ValidationError("d_max must be > 0")


@dataclass(frozen=True)
class Match:
    a: Region
    b: Region
    distance: float


def _centroid(r: Region, cache: dict) -> tuple[float, float]:
    key = id(r)
    if key not in cache:
        cache[key] = (r, r.centroid)
    return cache[key][1]


def _dilated_touch(a: Region, b: Region, shape) -> bool:
    da = ndimage.binary_dilation(a.mask(shape), structure=EIGHT)
    db = ndimage.binary_dilation(b.mask(shape), structure=EIGHT)
    return bool((da & db).any())


def _matches_between(regions_a, regions_b, p: PersistParams, shape, cache) -> list[Match]:
    out = []
    for a in regions_a:
        ca = _centroid(a, cache)
        for b in regions_b:
            d = math.dist(ca, _centroid(b, cache))
            if d <= p.d_max and (not p.require_overlap or _dilated_touch(a, b, shape)):
                out.append(Match(a, b, d))
    return out


def adjacency_matches(aset: AnnotationSet, z: int, p: PersistParams = PersistParams(),
                      _cache: dict | None = None) -> list[Match]:
    """Pairs ``(region on z, region on z-1 or z+1)`` within ``d_max`` of each other."""
    if not 0 <= z < aset.depth:
        raise ValidationError(f"slice index {z} outside 0..{aset.depth - 1}")
    cache = {} if _cache is None else _cache
    here = aset.on(z)
    out = []
    for zn in (z - 1, z + 1):
        if 0 <= zn < aset.depth:
            out.extend(_matches_between(here, aset.on(zn), p, aset.shape, cache))

    def key(m: Match):
        (ax, ay), (bx, by) = _centroid(m.a, cache), _centroid(m.b, cache)
        return m.b.z, ay, ax, by, bx

    return sorted(out, key=key)


def _recover_job(args):
    image, center, d_max, dp, z = args
    h, w = image.shape
    cx, cy = center
    half = int(math.floor(d_max))
    px, py = int(math.floor(cx)), int(math.floor(cy))
    y0, y1 = max(0, py - half), min(h, py + half + 1)
    x0, x1 = max(0, px - half), min(w, px + half + 1)
    window = image[y0:y1, x0:x1]
    iy, ix = np.unravel_index(int(np.argmin(window)), window.shape)
    seed = (y0 + int(iy), x0 + int(ix))
    region = grow_region(image, seed, dp, RELAXED, z)
    if region is None:
        return None
    decision = accept_region(region, image, dp, RELAXED)
    if not decision.accepted:
        return None
    return region.replace(origin=RECOVERED), decision.stats.centroid


def _linked(region: Region, aset_regions_by_z, z_other: int, p: PersistParams, shape, cache) -> bool:
    return bool(_matches_between([region], aset_regions_by_z[z_other], p, shape, cache))


def persistence_filter(aset: AnnotationSet, stack_bilateral: Stack, detect_params: DetectParams = DetectParams(),
                       p: PersistParams = PersistParams(), workers: int = 1, recover: bool = True):
    """Return ``(filtered_set, report)``.

    Regions lacking a match on a neighbouring slice trigger one relaxed
    re-growing attempt on that slice; afterwards every region without any
    cross-slice match is dropped and the survivors are linked into tracks.
    """
    from .parallel import ordered_map

    if stack_bilateral.shape != (aset.depth, aset.height, aset.width):
        raise ValidationError(f"annotation shape {(aset.depth, aset.height, aset.width)} "
                              f"does not match stack {stack_bilateral.shape}")
    shape = aset.shape
    cache: dict = {}
    by_z = [aset.on(z) for z in range(aset.depth)]

    # Phase 1: recovery on neighbour slices lacking a match.
    jobs = []
    if recover:
        for z in range(aset.depth):
            for r in by_z[z]:
                for zn in (z - 1, z + 1):
                    if 0 <= zn < aset.depth and not _linked(r, by_z, zn, p, shape, cache):
                        jobs.append((stack_bilateral[zn], _centroid(r, cache), p.d_max, detect_params, zn))
    found = ordered_map(_recover_job, jobs, workers)
    candidates: list[list] = [[] for _ in range(aset.depth)]
    for job, res in zip(jobs, found):
        if res is not None:
            candidates[job[4]].append(res)
    attempted = len(jobs)
    recovered_added = 0
    post = []
    for z in range(aset.depth):
        existing = [(r, _centroid(r, cache)) for r in by_z[z]]
        cands = sorted(candidates[z], key=lambda rc: (rc[1][1], rc[1][0], rc[0].runs))
        merged, _, _ = merge_into(existing, cands, detect_params, shape)
        recovered_added += len(merged) - len(existing)
        for r, c in merged:
            cache.setdefault(id(r), (r, c))
        post.append([r for r, _ in merged])

    # Phase 2: keep regions with at least one cross-slice match.
    post_set = AnnotationSet(aset.depth, aset.height, aset.width, [r for rs in post for r in rs])
    post_by_z = [post_set.on(z) for z in range(aset.depth)]
    for rs in post_by_z:
        for r in rs:
            _centroid(r, cache)
    edges = []
    for z in range(aset.depth - 1):
        for m in _matches_between(post_by_z[z], post_by_z[z + 1], p, shape, cache):
            edges.append((m.a, m.b))
    linked = {id(r) for e in edges for r in e}
    kept = [[r for r in rs if id(r) in linked] for rs in post_by_z]

    # Phase 3: tracks are connected components of the match graph.
    parent: dict[int, int] = {}

    def find(k):
        while parent.setdefault(k, k) != k:
            parent[k] = parent[parent[k]]
            k = parent[k]
        return k

    for a, b in edges:
        ra, rb = find(id(a)), find(id(b))
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    track_of: dict[int, int] = {}
    out = []
    for z in range(aset.depth):
        for r in sorted(kept[z], key=lambda r: (_centroid(r, cache)[1], _centroid(r, cache)[0], r.runs)):
            root = find(id(r))
            if root not in track_of:
                track_of[root] = len(track_of) + 1
            out.append(r.replace(track_id=track_of[root]))
    result = AnnotationSet(aset.depth, aset.height, aset.width, out)

    per_slice = []
    totals = {"kept": 0, "removed": 0, "recovered": 0}
    for z in range(aset.depth):
        kept_ids = {id(r) for r in kept[z]}
        entry = {
            "z": z,
            "input": len(by_z[z]),
            "kept": sum(1 for r in by_z[z] if id(r) in kept_ids),
            "recovered": sum(1 for r in kept[z] if r.origin == RECOVERED and r not in by_z[z]),
        }
        entry["removed"] = entry["input"] - entry["kept"]
        for k in totals:
            totals[k] += entry[k]
        per_slice.append(entry)
    report = {
        **totals,
        "input": len(aset),
        "output": len(result),
        "recovery_attempts": attempted,
        "recovered_candidates": recovered_added,
        "tracks": len(track_of),
        "slices": per_slice,
    }
    return result, report
