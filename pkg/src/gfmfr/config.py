"""Experiment configuration: one flat dataclass, mirrored one-to-one by the
``key = value`` config file format (config_version=1) and by CLI flags."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

CONFIG_VERSION = 1

SCHEDULES = ("scale-align", "smooth", "progressive", "ours")
GROUPINGS = ("kmeans", "random", "single", "kmeans+multiple-agg")
VARIANTS = ("gfmfr", "backbone")
KL_DIRECTIONS = ("group-teacher", "local-teacher")
DISTILL_SCOPES = ("batch", "sampled", "catalog")


@dataclass
class ExperimentConfig:
    config_version: int = CONFIG_VERSION
    rounds: int = 100
    groups: int = 4
    local_epochs: int = 5
    sample_ratio: float = 0.1
    lambda_base: float = 1.0
    schedule: str = "ours"
    grouping: str = "kmeans"
    variant: str = "gfmfr"
    ldp_delta: float = 0.0
    n_neg: int = 4
    embed_dim: int = 32
    hidden_dim: int = 16
    modality_dim: int = 16
    group_embed_dim: int = 8
    client_lr: float = 0.01
    fusion_lr: float = 0.01
    fusion_steps: int = 100
    seed: int = 0
    eval_every: int = 10
    top_k: int = 50
    smoothing: float = 0.9
    warmup_frac: float = 0.2
    kl_direction: str = "group-teacher"
    distill_scope: str = "sampled"
    distill_sample: int = 80
    exclude_train_items: bool = True
    kmeans_restarts: int = 10
    threads: int = 1

    def validate(self) -> None:
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(
                f"unsupported config_version {self.config_version}, expected {CONFIG_VERSION}"
            )
        for name in (
            "rounds", "groups", "local_epochs", "n_neg", "embed_dim", "hidden_dim",
            "modality_dim", "group_embed_dim", "fusion_steps", "eval_every",
            "top_k", "kmeans_restarts", "threads", "distill_sample",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.sample_ratio <= 1.0:
            raise ConfigError(f"sample_ratio must lie in (0, 1], got {self.sample_ratio}")
        if self.lambda_base < 0:
            raise ConfigError(f"lambda_base must be >= 0, got {self.lambda_base}")
        if self.ldp_delta < 0:
            raise ConfigError(f"ldp_delta must be >= 0, got {self.ldp_delta}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ConfigError(f"smoothing must lie in [0, 1), got {self.smoothing}")
        if not 0.0 < self.warmup_frac <= 1.0:
            raise ConfigError(f"warmup_frac must lie in (0, 1], got {self.warmup_frac}")
        if self.client_lr <= 0 or self.fusion_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}, valid: {SCHEDULES}")
        if self.grouping not in GROUPINGS:
            raise ConfigError(f"unknown grouping {self.grouping!r}, valid: {GROUPINGS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, valid: {VARIANTS}")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(
                f"unknown kl_direction {self.kl_direction!r}, valid: {KL_DIRECTIONS}"
            )
        if self.distill_scope not in DISTILL_SCOPES:
            raise ConfigError(
                f"unknown distill_scope {self.distill_scope!r}, valid: {DISTILL_SCOPES}"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _coerce(name: str, raw: str, target_type: type):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {name} = {raw!r} as {target_type.__name__}") from None


def config_from_dict(values: dict) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a flat ``key = value`` file ('#' starts a comment)."""
    types = {f.name: type(getattr(ExperimentConfig(), f.name)) for f in fields(ExperimentConfig)}
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in types:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            values[key] = _coerce(key, raw, types[key])
    if "config_version" not in values:
        raise ConfigError(f"{path}: missing config_version")
    return config_from_dict(values)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(cfg):
            fh.write(f"{f.name} = {getattr(cfg, f.name)}\n")
