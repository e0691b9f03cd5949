"""Command-line entry point: one subcommand per pipeline stage plus ``pipeline``.

Exit status: 0 success, 1 usage or config error, 2 I/O error, 3 validation error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import __version__
from .config import PipelineConfig, load_config
from .errors import ArannotError, ConfigError

log = logging.getLogger("arannot")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, *, input_help: str | None = None, output: bool = True):
    p.add_argument("--config", help="JSON config file (strict keys)")
    if input_help:
        p.add_argument("--input", help=input_help)
    if output:
        p.add_argument("--output", help="output directory")
    p.add_argument("--workers", type=int, help="concurrent slice workers (0 = one per CPU)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="arannot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"arannot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="generate a synthetic stack with ground truth")
    _common(p)
    p.add_argument("--seed", type=int, help="phantom RNG seed")

    p = sub.add_parser("correct", help="gradient-domain contrast correction")
    _common(p, input_help="stack directory")

    p = sub.add_parser("filter", help="bilateral and bilateral+sharpened stacks")
    _common(p, input_help="stack directory")

    p = sub.add_parser("detect", help="per-slice region growing")
    _common(p, input_help="directory holding bilateral/ and sharpened/ stacks")

    p = sub.add_parser("check", help="cross-slice persistence check")
    _common(p, input_help="detect output directory")
    p.add_argument("--filtered", required=True, help="directory holding the bilateral/ stack")

    p = sub.add_parser("eval", help="precision/recall against ground-truth labels")
    _common(p, input_help="annotation directory")
    p.add_argument("--truth", help="ground-truth label directory")

    p = sub.add_parser("overlay", help="burn annotations into RGB slice images")
    _common(p, input_help="stack directory")
    p.add_argument("--annotations", required=True, help="annotation directory")

    p = sub.add_parser("pipeline", help="correct -> filter -> detect -> check -> eval")
    _common(p, input_help="stack directory")
    p.add_argument("--truth", help="ground-truth label directory")
    for stage in ("correct", "check", "eval"):
        p.add_argument(f"--skip-{stage}", action="store_true", help=f"skip the {stage} stage")
    return parser


def _resolve(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if getattr(args, "input", None):
        cfg.input = args.input
    if getattr(args, "output", None):
        cfg.output = args.output
    if getattr(args, "truth", None):
        cfg.truth = args.truth
    if args.workers is not None:
        if args.workers < 0:
            raise ConfigError("--workers must be >= 0")
        cfg.workers = args.workers
    if getattr(args, "seed", None) is not None:
        cfg.phantom = dataclasses.replace(cfg.phantom, rng_seed=args.seed)
    skips = [s for s in ("correct", "check", "eval") if getattr(args, f"skip_{s}", False)]
    if skips:
        cfg.skip = tuple(sorted(set(cfg.skip) | set(skips)))
    return cfg


def _need(value, flag):
    if not value:
        raise ConfigError(f"missing required {flag}")
    return value


def run(args) -> None:
    from . import pipeline as pl
    from .volume import load_annotations, load_stack

    cfg = _resolve(args)
    cmd = args.command
    if cmd == "phantom":
        manifest = pl.write_phantom(cfg, _need(cfg.output, "--output"))
        log.info("wrote %d AR tracks, %d distractors", len(manifest["tracks"]), len(manifest["distractors"]))
    elif cmd == "correct":
        stack = load_stack(_need(cfg.input, "--input"))
        pl.stage_correct(stack, cfg, _need(cfg.output, "--output"))
    elif cmd == "filter":
        stack = load_stack(_need(cfg.input, "--input"))
        pl.stage_filter(stack, cfg, _need(cfg.output, "--output"))
    elif cmd == "detect":
        bil, sharp = pl.load_filtered(_need(cfg.input, "--input"))
        pl.stage_detect(bil, sharp, cfg, _need(cfg.output, "--output"))
    elif cmd == "check":
        aset = load_annotations(_need(cfg.input, "--input"))
        bil, _ = pl.load_filtered(args.filtered)
        pl.stage_check(aset, bil, cfg, _need(cfg.output, "--output"))
    elif cmd == "eval":
        aset = load_annotations(_need(cfg.input, "--input"))
        report = pl.stage_eval(aset, _need(cfg.truth, "--truth"), cfg, _need(cfg.output, "--output"))
        print(f"precision {report['precision']:.4f}  recall {report['recall']:.4f}  "
              f"(TP {report['tp']}, FP {report['fp']}, FN {report['fn']})")
    elif cmd == "overlay":
        stack = load_stack(_need(cfg.input, "--input"))
        pl.stage_overlay(stack, load_annotations(args.annotations), _need(cfg.output, "--output"))
    elif cmd == "pipeline":
        report = pl.run_pipeline(cfg)
        ev = report["stages"].get("eval")
        if ev:
            print(f"precision {ev['precision']:.4f}  recall {ev['recall']:.4f}  "
                  f"(TP {ev['tp']}, FP {ev['fp']}, FN {ev['fn']})")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        run(args)
    except ArannotError as exc:
        print(f"arannot: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
