"""One test per acceptance criterion; each records a PASS/FAIL line in the terminal summary."""
import json
import math
import time

import numpy as np
import pytest

from arannot.config import PipelineConfig
from arannot.correct import (CorrectionParams, CorrectionSystem, correct_stack, forward_gradient,
                             screened_poisson_solve)
from arannot.detect import DetectParams, detect_slice
from arannot.evaluate import EvalParams, evaluate, match_predictions, truth_instances
from arannot.filters import BilateralParams, SharpenParams, bilateral, laplacian_sharpen, neighbor_difference
from arannot.persistence import adjacency_matches
from arannot.phantom import PhantomConfig, generate_phantom
from arannot.pipeline import run_pipeline
from arannot.volume import (AnnotationSet, Region, Stack, load_annotations, load_labels, regions_from_labels,
                            rle_decode, rle_encode, save_annotations)
from oracles import (dense_screened_poisson, exhaustive_assignment, lattice_disk, naive_bilateral, naive_sharpen,
                     oracle_pairs, truncated_gaussian)
from test_cli import same_tree
from test_evaluate import scenes


def test_c01_bilateral_oracle(acceptance):
    rng = np.random.default_rng(1)
    p = BilateralParams(sigma_s=2.0, sigma_r=0.1)
    imgs = [rng.random((64, 64)) for _ in range(10)]
    t0 = time.perf_counter()
    outs = [bilateral(im, p) for im in imgs]
    elapsed = time.perf_counter() - t0
    err = max(np.abs(o - naive_bilateral(im, 2.0, 0.1, p.window_radius)).max() for o, im in zip(outs, imgs))
    ok = acceptance("C1 bilateral vs naive reference", err <= 1e-6 and elapsed < 5,
                    f"max diff {err:.2e} (<= 1e-6), {elapsed:.2f}s (< 5s)")
    assert ok


def test_c02_bilateral_limits(acceptance):
    rng = np.random.default_rng(2)
    const = np.full((64, 64), 0.43)
    exact = np.array_equal(bilateral(const), const)
    img = rng.random((64, 64))
    p = BilateralParams(sigma_s=3.0, sigma_r=10.0)
    err = np.abs(bilateral(img, p) - truncated_gaussian(img, 3.0, p.window_radius)).max()
    ok = acceptance("C2 bilateral degenerate limits", exact and err <= 1e-2,
                    f"constant exact={exact}, wide-range vs Gaussian {err:.2e} (<= 1e-2)")
    assert ok


def test_c03_sharpen(acceptance):
    rng = np.random.default_rng(3)
    img = rng.random((64, 64))
    identity = np.array_equal(laplacian_sharpen(img, SharpenParams(0.0)), img)
    err = np.abs(laplacian_sharpen(img, SharpenParams(1.0)) - naive_sharpen(img, 1.0)).max()
    step = np.full((16, 16), 0.4)
    step[:, 8:] = 0.55
    pre_clamp = step + 1.0 * neighbor_difference(step)
    grows = (pre_clamp[8, 8] - pre_clamp[8, 7]) > (step[8, 8] - step[8, 7])
    ok = acceptance("C3 Laplacian sharpen", identity and err <= 1e-9 and grows,
                    f"lambda=0 exact={identity}, vs reference {err:.2e} (<= 1e-9), edge contrast grows={grows}")
    assert ok


def test_c04_solver(acceptance):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    u_star = rng.random((32, 32))
    r1 = screened_poisson_solve(CorrectionSystem(*forward_gradient(u_star), u_star))
    rms = float(np.sqrt(np.mean((r1.u - u_star) ** 2)))
    sys = CorrectionSystem(rng.normal(0, 0.1, (32, 31)), rng.normal(0, 0.1, (31, 32)), rng.random((32, 32)))
    r2 = screened_poisson_solve(sys, CorrectionParams(alpha=0.05))
    elapsed = time.perf_counter() - t0
    err = float(np.abs(r2.u - dense_screened_poisson(sys.gx, sys.gy, sys.v, 0.05)).max())
    monotone = all(b <= a for res in (r1, r2) for a, b in zip(res.residuals, res.residuals[1:]))
    ok = acceptance("C4 screened-Poisson solver", rms <= 1e-6 and err <= 1e-6 and monotone and elapsed < 2,
                    f"consistent RMS {rms:.2e}, vs dense {err:.2e} (<= 1e-6), monotone={monotone}, "
                    f"{elapsed:.3f}s (< 2s)")
    assert ok


def test_c05_correction(acceptance, default_phantom):
    original = default_phantom[0].data
    data = original.copy()
    data[3] = np.clip(data[3] + 0.15, 0.0, 1.0)
    out, report = correct_stack(Stack(data))
    gm = report["global_mean"]
    mean_dev = max(abs(float(out[z].mean()) - gm) for z in range(out.depth))
    grad_rms = 0.0
    for z in range(out.depth):
        ax, ay = forward_gradient(out[z])
        bx, by = forward_gradient(data[z])
        grad_rms = max(grad_rms, float(np.sqrt((((ax - bx) ** 2).sum() + ((ay - by) ** 2).sum())
                                               / (ax.size + ay.size))))
    ok = acceptance("C5 correction with injected offset", mean_dev <= 1e-3 and grad_rms <= 1e-3,
                    f"slice-mean deviation {mean_dev:.2e} (<= 1e-3), gradient RMS {grad_rms:.2e} (<= 1e-3)")
    assert ok


def test_c06_detector_geometry(acceptance):
    p = DetectParams()
    img = np.full((64, 64), 0.6)
    img[lattice_disk((64, 64), 32, 32, 5)] = 0.15
    bil = bilateral(img)
    regions, _ = detect_slice(bil, laplacian_sharpen(bil), p)
    one = len(regions) == 1
    area = regions[0].area if one else 0
    cx, cy = regions[0].centroid if one else (math.inf, math.inf)
    cerr = math.hypot(cx - 32.5, cy - 32.5)
    disk_ok = one and abs(area - 81) <= 8 and cerr <= 1

    line = np.full((32, 96), 0.6)
    line[16, 18:78] = 0.15
    lregions, llog = detect_slice(line, line, p)
    line_ok = not lregions and llog["bilateral"]["rejected"].get("shape-circularity", 0) >= 1

    rect = np.full((128, 128), 0.6)
    rect[14:114, 14:114] = 0.15
    rregions, rlog = detect_slice(rect, rect, p)
    rect_ok = not rregions and rlog["bilateral"]["rejected"].get("oversize", 0) >= 1

    ok = acceptance("C6 detector geometry", disk_ok and line_ok and rect_ok,
                    f"disk: {len(regions)} detection(s), area {area}, centroid error {cerr:.2f}; "
                    f"line rejected(shape-circularity)={line_ok}; rectangle rejected(oversize)={rect_ok}")
    assert ok


def persistence_audit(detected, kept, labels, manifest):
    ar, spurious = set(manifest["labels"]["ar"]), set(manifest["labels"]["spurious"])
    kept_keys = {(r.z, r.runs) for r in kept.regions()}
    counts = dict(distractor=0, distractor_removed=0, true=0, true_removed=0)
    for z in range(detected.depth):
        regs = detected.on(z)
        for kind, exclude in (("distractor", ar), ("true", spurious)):
            for i, _, _, _ in match_predictions(regs, labels[z], exclude=exclude).pairs:
                counts[kind] += 1
                counts[kind + "_removed"] += (z, regs[i].runs) not in kept_keys
    eligible = recovered = 0
    for b in manifest["borderline"]:
        z, lab = b["z"], b["label"]
        neighbours = [zz for zz in (z - 1, z + 1) if 0 <= zz < detected.depth]
        if not any(any(pr[1] == lab for pr in match_predictions(detected.on(zz), labels[zz], exclude=spurious).pairs)
                   for zz in neighbours):
            continue
        eligible += 1
        rec = [r for r in kept.on(z) if r.origin == "recovered"]
        recovered += any(pr[1] == lab for pr in match_predictions(rec, labels[z], exclude=spurious).pairs)
    adjacency = all(any(m.a is r for m in adjacency_matches(kept, z)) for z in range(kept.depth)
                    for r in kept.on(z))
    return counts, eligible, recovered, adjacency


def test_c07_persistence(acceptance, pipeline_run, phantom_dir):
    out, _, _ = pipeline_run
    manifest = json.loads((phantom_dir / "manifest.json").read_text())
    labels = load_labels(phantom_dir / "truth")
    detected = load_annotations(out / "detect")
    kept = load_annotations(out / "check")
    c, eligible, recovered, adjacency = persistence_audit(detected, kept, labels, manifest)
    d_frac = c["distractor_removed"] / c["distractor"] if c["distractor"] else 1.0
    t_frac = c["true_removed"] / c["true"] if c["true"] else 0.0
    ok = acceptance(
        "C7 persistence on default phantom",
        d_frac >= 0.90 and t_frac <= 0.05 and recovered >= eligible and eligible > 0 and adjacency,
        f"distractors removed {c['distractor_removed']}/{c['distractor']} ({d_frac:.0%} >= 90%), "
        f"true removed {c['true_removed']}/{c['true']} ({t_frac:.1%} <= 5%), "
        f"borderline recovered {recovered}/{eligible}, adjacency re-verified={adjacency}")
    assert ok


def test_c08_end_to_end(acceptance, pipeline_run):
    out, report, elapsed = pipeline_run
    ev = report["stages"]["eval"]
    ok = acceptance("C8 end-to-end phantom gate", ev["precision"] >= 0.85 and ev["recall"] >= 0.50 and elapsed < 60,
                    f"precision {ev['precision']:.3f} (>= 0.85), recall {ev['recall']:.3f} (>= 0.50), "
                    f"{elapsed:.1f}s single worker (< 60s)")
    assert ok


def test_c09_evaluation(acceptance, default_phantom):
    _, labels, _ = default_phantom
    self_rep = evaluate(regions_from_labels(labels), labels)
    self_ok = self_rep["precision"] == self_rep["recall"] == 1.0
    empty = evaluate(AnnotationSet(*labels.shape), labels)
    empty_ok = empty["precision"] == 1.0 and empty["recall"] == 0.0 and bool(empty["degenerate"])
    p = EvalParams()
    n = agree = 0
    for truth, preds in scenes():
        insts = truth_instances(truth)
        lab = [t.label for t in insts]
        expected = exhaustive_assignment(oracle_pairs(preds, [t.mask for t in insts], p.tau_iou, p.d_match), lab)
        got = match_predictions([Region.from_mask(0, m) for m in preds], truth, p)
        n += 1
        agree += [(i, l) for i, l, _, _ in got.pairs] == sorted((i, lab[j]) for _, _, j, i in expected)
    ok = acceptance("C9 evaluation sanity", self_ok and empty_ok and agree == n,
                    f"self-match P=R=1: {self_ok}; empty flagged P=1,R=0: {empty_ok}; "
                    f"greedy == exhaustive on {agree}/{n} enumerated scenes")
    assert ok


def test_c10_determinism(acceptance, pipeline_run, phantom_dir, tmp_path):
    out1, _, _ = pipeline_run
    out8 = tmp_path / "run_w8"
    run_pipeline(PipelineConfig(input=str(phantom_dir / "stack"), output=str(out8),
                                truth=str(phantom_dir / "truth"), workers=8))
    same_run = same_tree(out1, out8)
    a = generate_phantom(PhantomConfig(rng_seed=42))
    b = generate_phantom(PhantomConfig(rng_seed=42))
    same_phantom = np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data) and a[2] == b[2]
    ok = acceptance("C10 determinism", same_run and same_phantom,
                    f"workers=1 vs workers=8 outputs byte-identical={same_run}; phantom bit-identical={same_phantom}")
    assert ok


def test_c11_round_trips(acceptance, pipeline_run, phantom_dir, tmp_path):
    rng = np.random.default_rng(11)
    rle_ok = True
    for _ in range(1000):
        h, w = rng.integers(1, 40, 2)
        m = rng.random((h, w)) < rng.random()
        rle_ok &= np.array_equal(rle_decode(rle_encode(m), m.shape), m)
    out, _, _ = pipeline_run
    from arannot.volume import load_stack

    stack = load_stack(out / "bilateral")
    aset = load_annotations(out / "check")
    save_annotations(aset, stack, tmp_path / "a")
    save_annotations(load_annotations(tmp_path / "a"), stack, tmp_path / "b")
    files_ok = same_tree(tmp_path / "a", tmp_path / "b") and all(
        (tmp_path / "a" / f.name).read_bytes() == f.read_bytes()
        for f in (out / "check").iterdir() if f.name != "persist_report.json")
    ok = acceptance("C11 round-trips", bool(rle_ok) and files_ok,
                    f"RLE identity on 1000 random masks={bool(rle_ok)}; save-load-save byte-identical={files_ok}")
    assert ok
