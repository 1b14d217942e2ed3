"""Run configuration: one flat JSON object validated against a published schema.

Precedence, lowest to highest: profile defaults, config file keys, command-line flags.
The ``full`` profile carries the reference training recipe at 1200x800. The ``toy``
profile (the default) shrinks the page to 256x192 and compresses the schedule so a
20-page corpus trains in 300 iterations on a CPU.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

import jsonschema

from .detector import CascadeConfig
from .geometry import DEFAULT_STAGE_STDS
from .msvote import ScaleSet
from .optim import LRSchedule
from .synth import PageSpec

_int = {"type": "integer"}
_bool = {"type": "boolean"}
_pair = {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RunConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "profile": {"enum": ["toy", "full"]},
        "seed": {"type": "integer", "minimum": 0},
        "input_height": {"type": "integer", "minimum": 32},
        "input_width": {"type": "integer", "minimum": 32},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "warmup_iters": {"type": "integer", "minimum": 0},
        "warmup_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "decay_epochs": {"type": "array", "items": _int},
        "decay_gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"const": 1},
        "stage_ious": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0,
                                                  "exclusiveMaximum": 1}, "minItems": 1},
        "anchor_ratios": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                          "minItems": 1},
        "anchor_scale": {"type": "number", "exclusiveMinimum": 0},
        "composite": _bool,
        "deformable": _bool,
        "score_thr": {"type": "number", "minimum": 0, "maximum": 1},
        "nms_thr": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "scales": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                   "minItems": 7, "maxItems": 7},
        "quorum": {"type": "integer", "minimum": 1, "maximum": 7},
        "cluster_iou": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "fusion": {"enum": ["weighted", "keep-seed"]},
        "eval_iou": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "aggregation": {"enum": ["micro", "macro"]},
        "n_train": {"type": "integer", "minimum": 0},
        "n_val": {"type": "integer", "minimum": 0},
        "n_test": {"type": "integer", "minimum": 0},
        "tables": _pair,
        "figures": _pair,
        "ruling_prob": {"type": "number", "minimum": 0, "maximum": 1},
        "noise": {"type": "number", "minimum": 0, "maximum": 1},
    },
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    profile: str = "full"
    seed: int = 0
    input_height: int = 1200
    input_width: int = 800
    lr: float = 0.00125
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float | None = 10.0
    warmup_iters: int = 500
    warmup_ratio: float = 0.0033
    decay_epochs: tuple[int, ...] = (25, 40)
    decay_gamma: float = 0.1
    epochs: int = 50
    batch_size: int = 1
    stage_ious: tuple[float, ...] = (0.5, 0.6, 0.7)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    anchor_scale: float = 8.0
    composite: bool = True
    deformable: bool = True
    score_thr: float = 0.6
    nms_thr: float = 0.3
    scales: tuple[float, ...] = (0.7, 0.8, 0.9, 1.0, 1.15, 1.3, 1.5)
    quorum: int = 4
    cluster_iou: float = 0.5
    fusion: str = "weighted"
    eval_iou: float = 0.5
    aggregation: str = "micro"
    n_train: int = 20
    n_val: int = 5
    n_test: int = 5
    tables: tuple[int, int] = (0, 3)
    figures: tuple[int, int] = (0, 2)
    ruling_prob: float = 0.6
    noise: float = 0.02

    # -- construction -------------------------------------------------------------
    @classmethod
    def for_profile(cls, profile: str = "toy") -> "RunConfig":
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}")
        return replace(cls(), **PROFILES[profile])

    @classmethod
    def from_mapping(cls, data: dict, overrides: dict | None = None) -> "RunConfig":
        """Validate ``data`` (file keys) then ``overrides`` (flag keys) on top of the chosen profile."""
        merged = dict(data)
        merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
        validate(merged)
        base = cls.for_profile(merged.get("profile", "toy"))
        cfg = replace(base, **{k: _tuplify(v) for k, v in merged.items()})
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "RunConfig":
        data: dict = {}
        if path is not None:
            try:
                data = json.loads(Path(path).read_text(encoding="utf-8"))
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
        return cls.from_mapping(data, overrides)

    def check(self) -> None:
        """Cross-field rules the schema cannot express."""
        if list(self.stage_ious) != sorted(set(self.stage_ious)):
            raise ConfigError("stage_ious must increase strictly")
        if len(self.stage_ious) > len(DEFAULT_STAGE_STDS):
            raise ConfigError(f"at most {len(DEFAULT_STAGE_STDS)} cascade stages are supported")
        try:
            ScaleSet(self.scales, self.quorum)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for key in ("tables", "figures"):
            lo, hi = getattr(self, key)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{key} must be an ordered non-negative range")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            raise ConfigError("decay_epochs must be ascending")

    # -- views ---------------------------------------------------------------------
    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def cascade(self) -> CascadeConfig:
        return CascadeConfig(stage_ious=self.stage_ious, stage_stds=DEFAULT_STAGE_STDS[:len(self.stage_ious)],
                             score_thr=self.score_thr, nms_thr=self.nms_thr,
                             composite_enabled=self.composite, deformable_enabled=self.deformable,
                             anchor_ratios=self.anchor_ratios, anchor_scale=self.anchor_scale)

    def page_spec(self) -> PageSpec:
        return PageSpec(height=self.input_height, width=self.input_width, tables=self.tables,
                        figures=self.figures, ruling_prob=self.ruling_prob, noise=self.noise,
                        seed=self.seed)

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr, self.warmup_iters, self.warmup_ratio, tuple(self.decay_epochs),
                          self.decay_gamma)

    def scale_set(self) -> ScaleSet:
        return ScaleSet(self.scales, self.quorum)


PROFILES: dict[str, dict] = {
    "full": {"profile": "full"},
    "toy": {"profile": "toy", "input_height": 256, "input_width": 192, "lr": 0.01,
            "warmup_iters": 50, "decay_epochs": (10, 13), "epochs": 15},
}


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v


def validate(data: dict) -> None:
    """Schema check with the offending key path in the message."""
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from exc


def field_names() -> list[str]:
    return [f.name for f in fields(RunConfig)]
