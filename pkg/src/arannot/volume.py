"""Stacks, regions, annotation sets and their on-disk formats."""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import IOFailure, ValidationError

SLICE_RE = re.compile(r"^z(\d{4})\.png$")
LABEL_RE = re.compile(r"^labels_z(\d{4})\.png$")
MAX_LABEL = 65535

EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class VoxelDims:
    dx: float = 3.0
    dy: float = 3.0
    dz: float = 30.0

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ValidationError(f"voxel dimensions must be positive, got {self}")

    def to_json(self) -> dict:
        return {"dx_nm": self.dx, "dy_nm": self.dy, "dz_nm": self.dz}

    @classmethod
    def from_json(cls, d: dict) -> "VoxelDims":
        unknown = set(d) - {"dx_nm", "dy_nm", "dz_nm"}
        if unknown:
            raise ValidationError(f"unknown key in stack manifest: {sorted(unknown)[0]}")
        return cls(float(d.get("dx_nm", 3.0)), float(d.get("dy_nm", 3.0)), float(d.get("dz_nm", 30.0)))


@dataclass(frozen=True, eq=False)
class Stack:
    """Ordered grayscale slices, shape ``(depth, height, width)``, values in [0, 1]."""

    data: np.ndarray
    dims: VoxelDims = field(default_factory=VoxelDims)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] < 1:
            raise ValidationError(f"stack must be a non-empty 3-D array, got shape {data.shape}")
        if data.size and (not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0):
            raise ValidationError("stack intensities must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def depth(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __getitem__(self, z: int) -> np.ndarray:
        return self.data[z]

    def __len__(self) -> int:
        return self.depth


def quantize(stack: Stack, bits: int = 16) -> Stack:
    """Round-trip a stack through ``bits``-deep integer storage."""
    scale = 255 if bits == 8 else 65535
    q = np.rint(stack.data * scale) / scale
    return Stack(q, stack.dims)


# --- run-length encoding -----------------------------------------------------

def rle_encode(mask: np.ndarray) -> tuple[tuple[int, int, int], ...]:
    """Encode a 2-D boolean mask as sorted ``(y, x_start, x_end)`` runs."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValidationError("mask must be 2-D")
    padded = np.zeros((mask.shape[0], mask.shape[1] + 2), dtype=np.int8)
    padded[:, 1:-1] = mask
    d = np.diff(padded, axis=1)
    ys, starts = np.nonzero(d == 1)
    _, ends = np.nonzero(d == -1)
    return tuple(zip(ys.tolist(), starts.tolist(), ends.tolist()))


def rle_decode(runs: Iterable[tuple[int, int, int]], shape: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for y, x0, x1 in runs:
        mask[y, x0:x1] = True
    return mask


def validate_runs(runs, shape: tuple[int, int]) -> None:
    h, w = shape
    prev = None
    for y, x0, x1 in runs:
        if not (0 <= y < h and 0 <= x0 < x1 <= w):
            raise ValidationError(f"run {(y, x0, x1)} outside slice bounds {w}x{h}")
        if prev is not None and (y < prev[0] or (y == prev[0] and x0 < prev[2])):
            raise ValidationError(f"runs overlap or are unsorted at {(y, x0, x1)}")
        prev = (y, x0, x1)


# --- regions -----------------------------------------------------------------

DETECTED = "detected"
RECOVERED = "recovered"


@dataclass(frozen=True)
class Region:
    z: int
    runs: tuple[tuple[int, int, int], ...]
    track_id: int | None = None
    origin: str = DETECTED

    def __post_init__(self):
        if not self.runs:
            raise ValidationError("region mask is empty")
        if self.origin not in (DETECTED, RECOVERED):
            raise ValidationError(f"unknown region origin {self.origin!r}")
        if self.track_id is not None and not (1 <= self.track_id <= MAX_LABEL):
            raise ValidationError(f"track id {self.track_id} outside 1..{MAX_LABEL}")

    @classmethod
    def from_mask(cls, z: int, mask: np.ndarray, **kw) -> "Region":
        return cls(z, rle_encode(mask), **kw)

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        return rle_decode(self.runs, shape)

    def pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(ys, xs)`` of every pixel in run order."""
        ys = [y for y, x0, x1 in self.runs for _ in range(x1 - x0)]
        xs = [x for _, x0, x1 in self.runs for x in range(x0, x1)]
        return np.asarray(ys, dtype=np.intp), np.asarray(xs, dtype=np.intp)

    @property
    def area(self) -> int:
        return sum(x1 - x0 for _, x0, x1 in self.runs)

    @property
    def centroid(self) -> tuple[float, float]:
        ys, xs = self.pixels()
        return float(xs.mean() + 0.5), float(ys.mean() + 0.5)

    def replace(self, **kw) -> "Region":
        d = {"z": self.z, "runs": self.runs, "track_id": self.track_id, "origin": self.origin}
        d.update(kw)
        return Region(**d)

    def shifted(self, dx: int, dy: int) -> "Region":
        return self.replace(runs=tuple((y + dy, x0 + dx, x1 + dx) for y, x0, x1 in self.runs))


@dataclass(frozen=True)
class RegionStats:
    area_px: int
    centroid: tuple[float, float]
    bbox: tuple[int, int, int, int]
    perimeter_units: int
    circularity: float
    aspect: float
    mean_intensity: float
    ring_intensity: float | None

    @property
    def contrast(self) -> float:
        if self.ring_intensity is None:
            return -math.inf
        return self.ring_intensity - self.mean_intensity

    def to_json(self) -> dict:
        return {
            "area_px": self.area_px,
            "centroid": list(self.centroid),
            "bbox": list(self.bbox),
            "perimeter_units": self.perimeter_units,
            "circularity": self.circularity,
            "aspect": self.aspect,
            "mean_intensity": self.mean_intensity,
            "ring_intensity": self.ring_intensity,
        }


def perimeter_units(mask: np.ndarray) -> int:
    """Count unit edges between mask pixels and non-mask pixels or the image border."""
    m = np.pad(np.asarray(mask, dtype=np.int8), 1)
    return int(np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum())


def ring_mask(mask: np.ndarray, width: int) -> np.ndarray:
    """Pixels within Chebyshev distance ``width`` of ``mask`` but not in it."""
    if width < 1:
        return np.zeros_like(mask, dtype=bool)
    grown = ndimage.binary_dilation(mask, structure=np.ones((2 * width + 1, 2 * width + 1), dtype=bool))
    return grown & ~mask


def region_stats(region: Region, image: np.ndarray, ring_width: int = 3) -> RegionStats:
    image = np.asarray(image, dtype=np.float64)
    if not region.runs:
        raise ValidationError("empty mask")
    validate_runs(region.runs, image.shape)
    ys, xs = region.pixels()
    area = len(ys)
    x0, x1, y0, y1 = int(xs.min()), int(xs.max()), int(ys.min()), int(ys.max())

    # Only the bounding box plus ring margin matters; avoids full-slice work.
    pad = max(ring_width, 1)
    cy0, cy1 = max(0, y0 - pad), min(image.shape[0], y1 + pad + 1)
    cx0, cx1 = max(0, x0 - pad), min(image.shape[1], x1 + pad + 1)
    local = np.zeros((cy1 - cy0, cx1 - cx0), dtype=bool)
    local[ys - cy0, xs - cx0] = True
    # Border contact only counts where the crop coincides with the true image border.
    full = np.zeros((local.shape[0] + 2, local.shape[1] + 2), dtype=np.int8)
    full[1:-1, 1:-1] = local
    perim = int(np.abs(np.diff(full, axis=0)).sum() + np.abs(np.diff(full, axis=1)).sum())

    crop = image[cy0:cy1, cx0:cx1]
    ring = ring_mask(local, ring_width)
    ring_val = float(crop[ring].mean()) if ring.any() else None
    bw, bh = x1 - x0 + 1, y1 - y0 + 1
    return RegionStats(
        area_px=area,
        centroid=(float(xs.mean() + 0.5), float(ys.mean() + 0.5)),
        bbox=(x0, y0, x1, y1),
        perimeter_units=perim,
        circularity=min(1.0, 4.0 * math.pi * area / perim**2),
        aspect=max(bw, bh) / min(bw, bh),
        mean_intensity=float(image[ys, xs].mean()),
        ring_intensity=ring_val,
    )


# --- annotation sets -----------------------------------------------------------

def _region_key(r: Region):
    return r.runs[0][0], r.runs[0][1]


class AnnotationSet:
    """All regions of a stack, grouped by slice."""

    def __init__(self, depth: int, height: int, width: int, regions: Iterable[Region] = (),
                 next_track_id: int | None = None):
        self.depth, self.height, self.width = depth, height, width
        by_z: list[list[Region]] = [[] for _ in range(depth)]
        for r in regions:
            if not 0 <= r.z < depth:
                raise ValidationError(f"region on slice {r.z} outside stack depth {depth}")
            validate_runs(r.runs, (height, width))
            by_z[r.z].append(r)
        self._by_z = [sorted(rs, key=_region_key) for rs in by_z]
        max_track = max((r.track_id or 0 for r in self.regions()), default=0)
        self.next_track_id = max(next_track_id or 1, max_track + 1)

    @classmethod
    def empty_like(cls, stack: Stack) -> "AnnotationSet":
        return cls(*stack.shape)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def on(self, z: int) -> list[Region]:
        return list(self._by_z[z])

    def regions(self) -> list[Region]:
        return [r for rs in self._by_z for r in rs]

    def __len__(self) -> int:
        return sum(len(rs) for rs in self._by_z)

    def __eq__(self, other) -> bool:
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return (self.depth, self.height, self.width) == (other.depth, other.height, other.width) \
            and self._by_z == other._by_z

    def check_disjoint(self) -> None:
        for z, rs in enumerate(self._by_z):
            seen = np.zeros(self.shape, dtype=bool)
            for r in rs:
                m = r.mask(self.shape)
                if (seen & m).any():
                    raise ValidationError(f"overlapping regions on slice {z}")
                seen |= m

    def label_map(self, z: int) -> np.ndarray:
        """16-bit label image: track id, or a per-slice ephemeral id for untracked regions."""
        out = np.zeros(self.shape, dtype=np.uint16)
        used = {r.track_id for r in self._by_z[z] if r.track_id is not None}
        ephemeral = 1
        for r in self._by_z[z]:
            label = r.track_id
            if label is None:
                while ephemeral in used:
                    ephemeral += 1
                label = ephemeral
                used.add(label)
            if label > MAX_LABEL:
                raise ValidationError(f"label {label} exceeds 16-bit range")
            ys, xs = r.pixels()
            if out[ys, xs].any():
                raise ValidationError(f"overlapping regions on slice {z}")
            out[ys, xs] = label
        return out


@dataclass(frozen=True, eq=False)
class LabelVolume:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValidationError("label volume must be 3-D")
        if data.size and (data.min() < 0 or data.max() > MAX_LABEL):
            raise ValidationError("labels must fit in 16 bits")
        data = data.astype(np.uint16)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self):
        return self.data.shape

    def __getitem__(self, z):
        return self.data[z]

    def __len__(self):
        return self.data.shape[0]


def regions_from_labels(labels: LabelVolume, exclude: Iterable[int] = ()) -> AnnotationSet:
    """Split every label into 8-connected components; each becomes a tracked region."""
    exclude = set(exclude)
    depth, h, w = labels.shape
    regions = []
    for z in range(depth):
        lab = labels[z]
        for value in np.unique(lab):
            if value == 0 or int(value) in exclude:
                continue
            comps, n = ndimage.label(lab == value, structure=EIGHT)
            for i in range(1, n + 1):
                regions.append(Region.from_mask(z, comps == i, track_id=int(value)))
    return AnnotationSet(depth, h, w, regions)


def render_labels(aset: AnnotationSet) -> LabelVolume:
    return LabelVolume(np.stack([aset.label_map(z) for z in range(aset.depth)]))


# --- I/O ---------------------------------------------------------------------

def _read_png(path: Path) -> tuple[np.ndarray, int]:
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.array(im)
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if mode == "L":
        return arr.astype(np.float64), 8
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.float64), 16
    raise ValidationError(f"{path.name}: unsupported image mode {mode!r} (expected 8- or 16-bit grayscale)")


def _indexed_files(directory: Path, pattern: re.Pattern) -> list[Path]:
    if not directory.is_dir():
        raise IOFailure(f"not a directory: {directory}")
    found = {}
    for p in directory.iterdir():
        m = pattern.match(p.name)
        if m:
            found[int(m.group(1))] = p
    if not found:
        raise ValidationError(f"no slice images matching {pattern.pattern} in {directory}")
    for i in range(len(found)):
        if i not in found:
            raise ValidationError(f"slice index gap in {directory}: missing index {i:04d}")
    return [found[i] for i in range(len(found))]


def load_stack(path) -> Stack:
    directory = Path(path)
    files = _indexed_files(directory, SLICE_RE)
    slices = []
    shape = None
    for f in files:
        arr, bits = _read_png(f)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValidationError(f"{f.name}: dimensions {arr.shape[::-1]} differ from {shape[::-1]}")
        slices.append(arr / (255.0 if bits == 8 else 65535.0))
    manifest = directory / "stack.json"
    dims = VoxelDims()
    if manifest.exists():
        try:
            dims = VoxelDims.from_json(json.loads(manifest.read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise IOFailure(f"cannot read {manifest}: {exc}") from exc
    return Stack(np.stack(slices), dims)


def save_stack(stack: Stack, out, bits: int = 16) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    scale, dtype = (255, np.uint8) if bits == 8 else (65535, np.uint16)
    for z in range(stack.depth):
        arr = np.rint(np.clip(stack[z], 0.0, 1.0) * scale).astype(dtype)
        _write_png(arr, out / f"z{z:04d}.png")
    write_json(out / "stack.json", stack.dims.to_json())


def _write_png(arr: np.ndarray, path: Path) -> None:
    try:
        Image.fromarray(arr).save(path, optimize=False)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def write_json(path, obj) -> None:
    try:
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc


def save_labels(labels: LabelVolume, out, prefix: str = "labels_") -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for z in range(len(labels)):
        _write_png(np.ascontiguousarray(labels[z]), out / f"{prefix}z{z:04d}.png")


def load_labels(path) -> LabelVolume:
    files = _indexed_files(Path(path), LABEL_RE)
    maps = []
    for f in files:
        try:
            with Image.open(f) as im:
                arr = np.array(im)
        except OSError as exc:
            raise IOFailure(f"cannot read {f}: {exc}") from exc
        if maps and arr.shape != maps[0].shape:
            raise ValidationError(f"{f.name}: dimensions differ from {files[0].name}")
        maps.append(arr.astype(np.uint16))
    return LabelVolume(np.stack(maps))


def annotations_to_json(aset: AnnotationSet, stack: Stack, ring_width: int = 3) -> dict:
    if stack.shape != (aset.depth, aset.height, aset.width):
        raise ValidationError(f"annotation set shape {(aset.depth, aset.height, aset.width)} "
                              f"does not match stack {stack.shape}")
    aset.check_disjoint()
    regions = []
    for r in aset.regions():
        regions.append({
            "z": r.z,
            "track_id": r.track_id,
            "origin": r.origin,
            "runs": [list(run) for run in r.runs],
            "stats": region_stats(r, stack[r.z], ring_width).to_json(),
        })
    return {
        "depth": aset.depth,
        "height": aset.height,
        "width": aset.width,
        "next_track_id": aset.next_track_id,
        "ring_width": ring_width,
        "regions": regions,
    }


def save_annotations(aset: AnnotationSet, stack: Stack, out, ring_width: int = 3) -> None:
    out = Path(out)
    doc = annotations_to_json(aset, stack, ring_width)
    out.mkdir(parents=True, exist_ok=True)
    save_labels(render_labels(aset), out)
    write_json(out / "annotations.json", doc)


def annotations_from_json(doc: dict) -> AnnotationSet:
    try:
        regions = [
            Region(int(d["z"]), tuple(tuple(int(v) for v in run) for run in d["runs"]),
                   None if d["track_id"] is None else int(d["track_id"]), d["origin"])
            for d in doc["regions"]
        ]
        return AnnotationSet(int(doc["depth"]), int(doc["height"]), int(doc["width"]), regions,
                             next_track_id=int(doc["next_track_id"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed annotations document: {exc}") from exc


def load_annotations(path) -> AnnotationSet:
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    return annotations_from_json(read_json(path))


def is_single_component(region: Region, shape: tuple[int, int]) -> bool:
    _, n = ndimage.label(region.mask(shape), structure=EIGHT)
    return n == 1


def atomic_dir(target) -> "_AtomicDir":
    return _AtomicDir(Path(target))


class _AtomicDir:
    """Write into a sibling temp directory, rename over ``target`` on success."""

    def __init__(self, target: Path):
        self.target = target
        self.tmp = target.with_name(f".{target.name}.tmp-{os.getpid()}")

    def __enter__(self) -> Path:
        import shutil

        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        try:
            self.tmp.mkdir(parents=True)
        except OSError as exc:
            raise IOFailure(f"cannot create {self.tmp}: {exc}") from exc
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        import shutil

        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        try:
            if self.target.exists():
                shutil.rmtree(self.target)
            self.tmp.rename(self.target)
        except OSError as e:
            shutil.rmtree(self.tmp, ignore_errors=True)
            raise IOFailure(f"cannot finalize {self.target}: {e}") from e
        return False
