"""Experiment configuration: one TOML file with strict, typed sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, get_args, get_origin, get_type_hints

import tomli
import tomli_w

from .routing import PipelineConfig

LAYOUT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    image_size: int = 128
    train_positive: int = 300
    train_negative: int = 150
    test_positive: int = 200
    test_negative: int = 200
    scale_factor: float = 0.75
    train_duplicate_scale: float = 0.75
    bands: int = 3


@dataclass(frozen=True)
class ProposerSection:
    channels: tuple[int, ...] = (16, 32, 32, 64)
    s_min: float = 0.2
    s_max: float = 0.7
    aspect_ratios: tuple[float, ...] = (1.0, 2.0, 0.5)
    match_iou: float = 0.5
    negative_ratio: float = 3.0
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3


@dataclass(frozen=True)
class GanSection:
    residual_blocks: int = 4
    base_channels: int = 8
    disc_channels: tuple[int, ...] = (8, 16, 32, 32)
    lambda_adv: float = 1e-4
    lambda_pixel: float = 1.0
    lambda_cycle: float = 0.1
    patches: int = 1000
    epochs: int = 12
    batch_size: int = 16
    lr_g: float = 1e-3
    lr_d: float = 2e-4
    cosine_decay: bool = True


@dataclass(frozen=True)
class ClassifierSection:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    jitters_per_box: int = 2
    hard_negatives: bool = True


@dataclass(frozen=True)
class EvalSection:
    iou_match: float = 0.5


@dataclass(frozen=True)
class PathsSection:
    workdir: str = "work"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    proposer: ProposerSection = field(default_factory=ProposerSection)
    gan: GanSection = field(default_factory=GanSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def section_hash(self, *names: str) -> str:
        """Stable digest of the named sections (plus the seed)."""
        payload = {"seed": self.seed, **{n: asdict(getattr(self, n)) for n in names}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _coerce(value: Any, hint, path: str):
    origin = get_origin(hint)
    if origin is tuple:
        inner = get_args(hint)[0]
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return tuple(_coerce(v, inner, f"{path}[{i}]") for i, v in enumerate(value))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {hint}")


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a table")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(", ".join(f"{path + '.' if path else ''}{k}: unknown key" for k in unknown))
    kwargs = {}
    for name, value in raw.items():
        hint = hints[name]
        key = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, key)
        else:
            kwargs[name] = _coerce(value, hint, key)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def _positive(cfg: ExperimentConfig) -> list[str]:
    errs = []
    checks = {
        "dataset.image_size": cfg.dataset.image_size,
        "dataset.test_positive": cfg.dataset.test_positive + 1,
        "dataset.bands": cfg.dataset.bands,
        "proposer.batch_size": cfg.proposer.batch_size,
        "gan.patches": cfg.gan.patches,
        "gan.batch_size": cfg.gan.batch_size,
        "gan.residual_blocks": cfg.gan.residual_blocks,
        "gan.base_channels": cfg.gan.base_channels,
        "classifier.batch_size": cfg.classifier.batch_size,
        "classifier.jitters_per_box": cfg.classifier.jitters_per_box,
    }
    for k, v in checks.items():
        if v < 1:
            errs.append(f"{k}: must be positive")
    for k in ("train_positive", "train_negative", "test_positive", "test_negative"):
        if getattr(cfg.dataset, k) < 0:
            errs.append(f"dataset.{k}: must be non-negative")
    for k in ("epochs",):
        for sec in ("proposer", "gan", "classifier"):
            if getattr(getattr(cfg, sec), k) < 0:
                errs.append(f"{sec}.{k}: must be non-negative")
    for k in ("scale_factor", "train_duplicate_scale"):
        if not 0.0 < getattr(cfg.dataset, k) <= 1.0:
            errs.append(f"dataset.{k}: must lie in (0, 1]")
    if cfg.dataset.train_positive < 1:
        errs.append("dataset.train_positive: training needs at least one positive frame")
    if cfg.dataset.test_positive < cfg.dataset.bands:
        errs.append("dataset.test_positive: need at least one positive test frame per band")
    if cfg.pipeline.routing_threshold >= cfg.dataset.image_size:
        errs.append("pipeline.routing_threshold: must be below dataset.image_size")
    if not cfg.proposer.channels or min(cfg.proposer.channels) < 1 or len(cfg.proposer.channels) < 2:
        errs.append("proposer.channels: need at least two positive entries")
    if not cfg.gan.disc_channels or min(cfg.gan.disc_channels) < 1:
        errs.append("gan.disc_channels: need positive entries")
    if not 0 < cfg.proposer.s_min <= cfg.proposer.s_max <= 1:
        errs.append("proposer.s_min/s_max: need 0 < s_min <= s_max <= 1")
    if not 0 < cfg.proposer.match_iou < 1:
        errs.append("proposer.match_iou: must lie in (0, 1)")
    if not 0 < cfg.eval.iou_match <= 1:
        errs.append("eval.iou_match: must lie in (0, 1]")
    weights = (cfg.gan.lambda_adv, cfg.gan.lambda_pixel, cfg.gan.lambda_cycle)
    if min(weights) < 0 or max(weights) == 0:
        errs.append("gan.lambda_*: weights must be non-negative with at least one positive")
    for sec, k in (("proposer", "lr"), ("gan", "lr_g"), ("gan", "lr_d"), ("classifier", "lr")):
        if getattr(getattr(cfg, sec), k) <= 0:
            errs.append(f"{sec}.{k}: must be positive")
    return errs


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    errs = _positive(cfg)
    if errs:
        raise ConfigError("; ".join(errs))
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(asdict(cfg))


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(raw)


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
