"""Instance-level precision/recall against a ground-truth label volume."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .volume import EIGHT, AnnotationSet, LabelVolume, Region

# Reported on 20 expert-annotated slices of the original EM volume; the data
# are not available here, so these are carried as reference values only.
REFERENCE_PRECISION = 0.87
REFERENCE_RECALL = 0.52

MODES = ("iou", "centroid", "either")


@dataclass(frozen=True)
class EvalParams:
    tau_iou: float = 0.3
    d_match: float = 5.0
    mode: str = "either"

    def __post_init__(self):
        if not 0 < self.tau_iou <= 1:
            raise ValidationError("tau_iou must lie in (0, 1]")
        if not self.d_match > 0:
            raise ValidationError("d_match must be > 0")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class TruthInstance:
    label: int
    mask: np.ndarray
    area: int
    centroid: tuple[float, float]


@dataclass
class SliceMatch:
    tp: int
    fp: int
    fn: int
    pairs: list = field(default_factory=list)  # (prediction index, truth label, iou, distance)


def truth_instances(label_map: np.ndarray, exclude: Iterable[int] = ()) -> list[TruthInstance]:
    exclude = set(exclude)
    out = []
    for value in np.unique(label_map):
        if value == 0 or int(value) in exclude:
            continue
        comps, n = ndimage.label(label_map == value, structure=EIGHT)
        for i in range(1, n + 1):
            m = comps == i
            ys, xs = np.nonzero(m)
            out.append(TruthInstance(int(value), m, len(ys), (float(xs.mean() + 0.5), float(ys.mean() + 0.5))))
    return out


def candidate_pairs(preds: list[Region], truths: list[TruthInstance], shape, p: EvalParams) -> list[tuple]:
    """``(iou, distance, truth_index, pred_index)`` for every pair meeting the mode's criterion."""
    out = []
    for i, r in enumerate(preds):
        pm = r.mask(shape)
        pa = int(pm.sum())
        pc = r.centroid
        for j, t in enumerate(truths):
            inter = int((pm & t.mask).sum())
            iou = inter / (pa + t.area - inter)
            dist = math.dist(pc, t.centroid)
            ok_iou = iou >= p.tau_iou
            ok_dist = dist <= p.d_match
            if (p.mode == "iou" and ok_iou) or (p.mode == "centroid" and ok_dist) \
                    or (p.mode == "either" and (ok_iou or ok_dist)):
                out.append((iou, dist, j, i))
    return out


def greedy_assign(pairs: list[tuple], truth_labels: list[int]) -> list[tuple]:
    """One-to-one assignment in descending IoU, then ascending distance, then truth label."""
    order = sorted(pairs, key=lambda t: (-t[0], t[1], truth_labels[t[2]], t[2], t[3]))
    used_t, used_p, chosen = set(), set(), []
    for iou, dist, j, i in order:
        if j in used_t or i in used_p:
            continue
        used_t.add(j)
        used_p.add(i)
        chosen.append((iou, dist, j, i))
    return chosen


def match_predictions(preds: list[Region], label_map: np.ndarray, p: EvalParams = EvalParams(),
                      exclude: Iterable[int] = ()) -> SliceMatch:
    label_map = np.asarray(label_map)
    for r in preds:
        if r.runs[-1][0] >= label_map.shape[0] or max(x1 for _, _, x1 in r.runs) > label_map.shape[1]:
            raise ValidationError("prediction extends beyond the truth label map")
    truths = truth_instances(label_map, exclude)
    chosen = greedy_assign(candidate_pairs(preds, truths, label_map.shape, p), [t.label for t in truths])
    pairs = sorted((i, truths[j].label, iou, dist) for iou, dist, j, i in chosen)
    tp = len(chosen)
    return SliceMatch(tp, len(preds) - tp, len(truths) - tp, pairs)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (1.0, True) if den == 0 else (num / den, False)


def evaluate(aset: AnnotationSet, truth: LabelVolume, p: EvalParams = EvalParams(),
             exclude: Iterable[int] = ()) -> dict:
    """Aggregate per-slice matchings into an evaluation report dictionary."""
    exclude = sorted(set(exclude))
    if truth.shape != (aset.depth, aset.height, aset.width):
        raise ValidationError(f"truth shape {truth.shape} does not match annotations "
                              f"{(aset.depth, aset.height, aset.width)}")
    per_slice = []
    tp = fp = fn = 0
    for z in range(aset.depth):
        m = match_predictions(aset.on(z), truth[z], p, exclude)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
        prec, _ = _ratio(m.tp, m.tp + m.fp)
        rec, _ = _ratio(m.tp, m.tp + m.fn)
        per_slice.append({
            "z": z, "tp": m.tp, "fp": m.fp, "fn": m.fn, "precision": prec, "recall": rec,
            "matches": [{"prediction": i, "truth_label": lab, "iou": iou, "distance": d}
                        for i, lab, iou, d in m.pairs],
        })
    precision, p_degenerate = _ratio(tp, tp + fp)
    recall, r_degenerate = _ratio(tp, tp + fn)
    degenerate = []
    if p_degenerate:
        degenerate.append("precision: no predictions (TP+FP = 0)")
    if r_degenerate:
        degenerate.append("recall: no truth instances (TP+FN = 0)")
    return {
        "reference": {"precision": REFERENCE_PRECISION, "recall": REFERENCE_RECALL,
                      "note": "published full-data values; not reproducible on synthetic stacks"},
        "params": {"tau_iou": p.tau_iou, "d_match": p.d_match, "mode": p.mode},
        "excluded_labels": exclude,
        "tp": tp, "fp": fp, "fn": fn,
        "precision": precision,
        "recall": recall,
        "degenerate": degenerate,
        "slices": per_slice,
    }
