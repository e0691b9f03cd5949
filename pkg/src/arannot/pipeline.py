"""Stage runners shared by the individual subcommands and the end-to-end pipeline.

Every stage hands the next one the stack exactly as it is stored on disk
(16-bit PNG), so chaining subcommands by hand reproduces ``pipeline`` output.
"""
from __future__ import annotations

import logging
from pathlib import Path

from . import __version__
from .config import PipelineConfig
from .correct import correct_stack
from .detect import detect_stack
from .errors import ConfigError
from .evaluate import evaluate
from .filters import bilateral_stack, sharpen_stack
from .overlay import save_overlays
from .persistence import persistence_filter
from .phantom import generate_phantom
from .volume import (AnnotationSet, LabelVolume, Stack, atomic_dir, load_annotations, load_labels, load_stack,
                     quantize, read_json, save_annotations, save_labels, save_stack, write_json)

log = logging.getLogger(__name__)

STAGE_BITS = 16


def _summary(report: dict, drop=("slices",)) -> dict:
    return {k: v for k, v in report.items() if k not in drop}


# --- phantom -----------------------------------------------------------------

def write_phantom(cfg: PipelineConfig, out) -> dict:
    stack, labels, manifest = generate_phantom(cfg.phantom)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_dir(out / "stack") as tmp:
        save_stack(stack, tmp, bits=8)
    with atomic_dir(out / "truth") as tmp:
        save_labels(labels, tmp)
    write_json(out / "manifest.json", manifest)
    return manifest


# --- correct -----------------------------------------------------------------

def stage_correct(stack: Stack, cfg: PipelineConfig, out) -> tuple[Stack, dict]:
    corrected, report = correct_stack(stack, cfg.correction, cfg.workers)
    corrected = quantize(corrected, STAGE_BITS)
    with atomic_dir(out) as tmp:
        save_stack(corrected, tmp, STAGE_BITS)
        write_json(tmp / "correction_report.json", report)
    return corrected, report


# --- filter ------------------------------------------------------------------

def stage_filter(stack: Stack, cfg: PipelineConfig, out) -> tuple[Stack, Stack]:
    out = Path(out)
    bil = quantize(bilateral_stack(stack, cfg.bilateral, cfg.workers), STAGE_BITS)
    sharp = quantize(sharpen_stack(bil, cfg.sharpen, cfg.workers), STAGE_BITS)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_dir(out / "bilateral") as tmp:
        save_stack(bil, tmp, STAGE_BITS)
    with atomic_dir(out / "sharpened") as tmp:
        save_stack(sharp, tmp, STAGE_BITS)
    return bil, sharp


def load_filtered(path) -> tuple[Stack, Stack]:
    path = Path(path)
    return load_stack(path / "bilateral"), load_stack(path / "sharpened")


# --- detect / check ------------------------------------------------------------

def stage_detect(bil: Stack, sharp: Stack, cfg: PipelineConfig, out) -> tuple[AnnotationSet, dict]:
    aset, report = detect_stack(bil, sharp, cfg.detect, cfg.workers)
    with atomic_dir(out) as tmp:
        save_annotations(aset, bil, tmp, cfg.detect.ring_width)
        write_json(tmp / "detect_log.json", report)
    return aset, report


def stage_check(aset: AnnotationSet, bil: Stack, cfg: PipelineConfig, out) -> tuple[AnnotationSet, dict]:
    checked, report = persistence_filter(aset, bil, cfg.detect, cfg.persist, cfg.workers)
    with atomic_dir(out) as tmp:
        save_annotations(checked, bil, tmp, cfg.detect.ring_width)
        write_json(tmp / "persist_report.json", report)
    return checked, report


# --- eval --------------------------------------------------------------------

def spurious_labels(truth_dir) -> list[int]:
    """Labels the phantom manifest flags as spurious, if a manifest sits next to the truth maps."""
    truth_dir = Path(truth_dir)
    for candidate in (truth_dir / "manifest.json", truth_dir.parent / "manifest.json"):
        if candidate.exists():
            return sorted(read_json(candidate).get("labels", {}).get("spurious", []))
    return []


def stage_eval(aset: AnnotationSet, truth_dir, cfg: PipelineConfig, out) -> dict:
    truth: LabelVolume = load_labels(truth_dir)
    report = evaluate(aset, truth, cfg.eval, spurious_labels(truth_dir))
    with atomic_dir(out) as tmp:
        write_json(tmp / "eval_report.json", report)
    return report


def stage_overlay(stack: Stack, aset: AnnotationSet, out) -> None:
    with atomic_dir(out) as tmp:
        save_overlays(stack, aset, tmp)


# --- end to end ------------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig) -> dict:
    if not cfg.input or not cfg.output:
        raise ConfigError("pipeline needs both an input stack and an output directory")
    out = Path(cfg.output)
    stack = load_stack(cfg.input)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"version": __version__, "params": cfg.params_json(), "skipped": sorted(cfg.skip),
                    "shape": list(stack.shape), "stages": {}}

    if "correct" in cfg.skip:
        corrected = stack
    else:
        log.info("correcting %d slices", stack.depth)
        corrected, crep = stage_correct(stack, cfg, out / "corrected")
        report["stages"]["correct"] = crep
    log.info("filtering")
    bil, sharp = stage_filter(corrected, cfg, out)
    log.info("detecting")
    detected, drep = stage_detect(bil, sharp, cfg, out / "detect")
    report["stages"]["detect"] = {"regions": drep["total_regions"],
                                  "per_slice": [e["regions"] for e in drep["slices"]]}
    final = detected
    if "check" not in cfg.skip:
        log.info("checking cross-slice persistence")
        final, prep = stage_check(detected, bil, cfg, out / "check")
        report["stages"]["check"] = _summary(prep)
    if cfg.truth and "eval" not in cfg.skip:
        log.info("evaluating against %s", cfg.truth)
        erep = stage_eval(final, cfg.truth, cfg, out / "eval")
        report["stages"]["eval"] = _summary(erep)
    stage_overlay(stack, final, out / "overlay")
    write_json(out / "pipeline_report.json", report)
    return report


__all__ = [
    "run_pipeline", "write_phantom", "stage_correct", "stage_filter", "stage_detect", "stage_check",
    "stage_eval", "stage_overlay", "load_filtered", "load_annotations", "spurious_labels",
]
