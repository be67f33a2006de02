"""Run configuration: one YAML document covering model, training, data and paths."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import SynthConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    batch_size: int = 16
    k_sweep: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 8, 10, 12, 16])
    threshold: float = 0.5


@dataclass
class AblationConfig:
    factor: int = 2


@dataclass
class HardConfig:
    threshold: int = 20
    resize_to: int = 256


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    hard: HardConfig = field(default_factory=HardConfig)
    data_dir: str | None = None
    out_dir: str = "runs"

    def validate(self):
        try:
            self.model.lattice()
            self.train.validate()
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.synth.image_size != self.model.image_size:
            raise ConfigError("synth.image_size and model.image_size must agree")
        if len(self.model.native_widths) != len(self.model.backbone_widths):
            raise ConfigError("native_widths and backbone_widths need the same number of stages")
        return self


# Narrow widths so the training protocols fit a single CPU core.
DESK_MODEL = dict(native_widths=[4, 8, 8, 8], native_blocks=1, backbone_widths=[8, 16, 32, 32],
                  decoder_width=8, head_width=8)

PRESETS = {"default": {}, "desk": {"model": DESK_MODEL}}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            value = _build(type(current), value or {}, f"{where}.{name}")
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def config_from_dict(data: dict | None, preset: str = "default") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    merged = _merge(PRESETS[preset], data or {})
    return _build(RunConfig, merged, "config").validate()


def to_dict(cfg: RunConfig) -> dict:
    def plain(x):
        if isinstance(x, tuple):
            return [plain(v) for v in x]
        if isinstance(x, list):
            return [plain(v) for v in x]
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        return x

    return plain(dataclasses.asdict(cfg))


def load_config(path: str | Path | None, preset: str = "default") -> RunConfig:
    if path is None:
        return config_from_dict({}, preset)
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data, preset)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def config_digest(obj: Any) -> str:
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=list).encode()).hexdigest()[:16]


def cache_dir() -> Path:
    return Path(os.environ.get("NA_IRSTD_CACHE", Path.home() / ".cache" / "na_irstd"))
