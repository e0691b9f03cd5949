"""Strict JSON pipeline configuration."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .correct import CorrectionParams
from .detect import DetectParams
from .errors import ConfigError, ValidationError
from .evaluate import EvalParams
from .filters import BilateralParams, SharpenParams
from .persistence import PersistParams
from .phantom import PhantomConfig

# config key -> dataclass field, where Python forbids the natural name
_ALIASES = {SharpenParams: {"lambda": "strength"}}

SECTIONS = {
    "correction": CorrectionParams,
    "bilateral": BilateralParams,
    "sharpen": SharpenParams,
    "detect": DetectParams,
    "persist": PersistParams,
    "eval": EvalParams,
    "phantom": PhantomConfig,
}

STAGES = ("correct", "check", "eval")


@dataclass
class PipelineConfig:
    input: str | None = None
    output: str | None = None
    truth: str | None = None
    workers: int = 1
    skip: tuple[str, ...] = ()
    correction: CorrectionParams = field(default_factory=CorrectionParams)
    bilateral: BilateralParams = field(default_factory=BilateralParams)
    sharpen: SharpenParams = field(default_factory=SharpenParams)
    detect: DetectParams = field(default_factory=DetectParams)
    persist: PersistParams = field(default_factory=PersistParams)
    eval: EvalParams = field(default_factory=EvalParams)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)

    def params_json(self) -> dict:
        """Every algorithm parameter, keyed as in the config file (no paths, no worker count)."""
        out = {}
        for name, cls in SECTIONS.items():
            obj = getattr(self, name)
            inverse = {v: k for k, v in _ALIASES.get(cls, {}).items()}
            sec = {}
            for f in fields(cls):
                v = getattr(obj, f.name)
                sec[inverse.get(f.name, f.name)] = list(v) if isinstance(v, tuple) else v
            out[name] = sec
        return out


def _section(cls, data, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"config section '{name}' must be an object")
    aliases = _ALIASES.get(cls, {})
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        target = aliases.get(key, key)
        if target not in known:
            raise ConfigError(f"unknown config key '{name}.{key}'")
        kwargs[target] = value
    try:
        return cls(**kwargs)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid '{name}' parameters: {exc}") from exc


def parse_config(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    cfg = PipelineConfig()
    for key, value in doc.items():
        if key in SECTIONS:
            setattr(cfg, key, _section(SECTIONS[key], value, key))
        elif key in ("input", "output", "truth"):
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"config key '{key}' must be a path string")
            setattr(cfg, key, value)
        elif key == "workers":
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise ConfigError("config key 'workers' must be an integer >= 0")
            cfg.workers = value
        elif key == "skip":
            if not isinstance(value, list) or any(v not in STAGES for v in value):
                raise ConfigError(f"config key 'skip' must be a list drawn from {list(STAGES)}")
            cfg.skip = tuple(value)
        else:
            raise ConfigError(f"unknown config key '{key}'")
    return cfg


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc)
