"""Run configuration: JSON file plus dotted command-line overrides.

Every group is validated through its owning dataclass before any
subcommand touches the filesystem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .farneback import FlowConfig
from .flowmatch import POOL, SampleConfig, TrainConfig
from .layout import LayoutMode, TemporalReference
from .model import DenoiserConfig, MaskMode


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train_clips: int = 256
    val_clips: int = 32
    frames: int = 9
    height: int = 32
    width: int = 32
    scale: int = 3
    max_text_len: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.train_clips < 1 or self.val_clips < 1:
            raise ConfigError("train_clips and val_clips must be >= 1")
        if self.frames < 3 or self.frames % 2 == 0:
            raise ConfigError(f"frames must be odd and >= 3, got {self.frames}")
        if self.height % POOL or self.width % POOL:
            raise ConfigError(
                f"height and width must be divisible by the pooling factor {POOL}"
            )


@dataclass
class EvalConfig:
    tau: float = 0.1

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")


@dataclass
class PathsConfig:
    dataset_dir: str = "data"
    run_dir: str = "run"
    checkpoint: str = ""
    pred_dir: str = ""
    gt_dir: str = ""


@dataclass
class SampleSelection:
    clip: str = ""  # dataset clip id supplying reference + effect; first val clip if empty


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    sample_sel: SampleSelection = field(default_factory=SampleSelection)
    flow: FlowConfig = field(default_factory=FlowConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        p = self.denoiser.patch_size
        if (self.data.height // POOL) % p or (self.data.width // POOL) % p:
            raise ConfigError(
                f"latent half-grid {self.data.height // POOL}x{self.data.width // POOL} "
                f"must be divisible by patch_size {p}"
            )


_ENUM_FIELDS = {
    ("train", "layout"): LayoutMode,
    ("train", "temporal_reference"): TemporalReference,
    ("denoiser", "mask_mode"): MaskMode,
}

_GROUPS = {
    "data": DataConfig,
    "train": TrainConfig,
    "denoiser": DenoiserConfig,
    "sample": SampleConfig,
    "sample_sel": SampleSelection,
    "flow": FlowConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
}


def _coerce(group: str, name: str, value):
    enum_type = _ENUM_FIELDS.get((group, name))
    if enum_type is not None and isinstance(value, str):
        try:
            return enum_type(value)
        except ValueError as exc:
            choices = [e.value for e in enum_type]
            raise ConfigError(f"{group}.{name} must be one of {choices}, got {value!r}") from exc
    return value


def _parse_literal(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def load_config(
    config_path: str | None = None,
    overrides: list[str] | None = None,
) -> RunConfig:
    """Build a validated RunConfig from defaults, a JSON file, and k=v overrides."""
    raw: dict[str, dict] = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        raw = loaded

    merged: dict[str, dict] = {g: dict(raw.get(g, {})) for g in _GROUPS}
    unknown = set(raw) - set(_GROUPS)
    if unknown:
        raise ConfigError(f"unknown config groups: {sorted(unknown)}")

    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like group.key=value")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be group.key")
        group, name = key.split(".", 1)
        if group not in _GROUPS:
            raise ConfigError(f"unknown config group {group!r} in override {item!r}")
        merged[group][name] = _parse_literal(value)

    built = {}
    for group, cls in _GROUPS.items():
        names = {f.name for f in fields(cls)}
        extra = set(merged[group]) - names
        if extra:
            raise ConfigError(f"unknown keys in group {group!r}: {sorted(extra)}")
        kwargs = {k: _coerce(group, k, v) for k, v in merged[group].items()}
        try:
            built[group] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {group} config: {exc}") from exc

    cfg = RunConfig(**built)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out: dict[str, dict] = {}
    for group, cls in _GROUPS.items():
        values = {}
        for f in fields(cls):
            v = getattr(getattr(cfg, group), f.name)
            values[f.name] = v.value if hasattr(v, "value") else v
        out[group] = values
    return out
