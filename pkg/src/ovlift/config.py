"""Pipeline configuration: flat dotted keys from a TOML file, overridable per key."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import tomli

from .labeling import LabelStrategy
from .merging import ColumnNorm

WORKERS_ENV = "OVLIFT_WORKERS"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    scene: Optional[str] = None
    backend_fixture: Optional[str] = None
    backend_subprocess: Optional[str] = None
    n_prompts: int = 200
    frame_stride: int = 10
    views: int = 5
    theta: float = 0.3
    tau: float = 0.45
    column_norm: str = "L1"
    max_passes: int = 0  # 0: number of coarse masks
    label_strategy: str = "score"
    k_pixel_prompts: int = 5
    eps_depth: float = 0.05
    crop_pad: float = 0.1
    superpoint_k_nn: int = 10
    superpoint_k_fh: float = 0.05
    superpoint_min_size: int = 50
    blocklist: Optional[str] = None  # None: bundled list
    output: str = "ovlift_out"
    seed: int = 0
    workers: int = 1
    debug: bool = False

    def validate(self):
        checks = [
            (0 < self.tau <= 1, f"tau must lie in (0, 1], got {self.tau}"),
            (0 <= self.theta < 1, f"theta must lie in [0, 1), got {self.theta}"),
            (self.n_prompts >= 1, "n_prompts must be >= 1"),
            (self.frame_stride >= 1, "frame_stride must be >= 1"),
            (self.views >= 1, "views must be >= 1"),
            (self.k_pixel_prompts >= 1, "k_pixel_prompts must be >= 1"),
            (self.eps_depth > 0, "eps_depth must be positive"),
            (self.crop_pad >= 0, "crop_pad must be non-negative"),
            (self.max_passes >= 0, "max_passes must be >= 0"),
            (self.superpoint_k_nn >= 1, "superpoint.k_nn must be >= 1"),
            (self.superpoint_k_fh > 0, "superpoint.k_fh must be positive"),
            (self.superpoint_min_size >= 1, "superpoint.min_size must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
            (not (self.backend_fixture and self.backend_subprocess),
             "choose one of backend.fixture and backend.subprocess"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            ColumnNorm(self.column_norm)
            LabelStrategy(self.label_strategy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    @property
    def effective_workers(self) -> int:
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
            if n < 1:
                raise ConfigError(f"{WORKERS_ENV} must be >= 1")
            return n
        return self.workers

    def to_dict(self):
        return {key: getattr(self, attr) for key, attr in KEYS.items()}


# Dotted config key -> dataclass attribute.
KEYS = {f.name.replace("_", ".", 1) if f.name.startswith(("backend_", "superpoint_")) else f.name: f.name
        for f in fields(PipelineConfig)}
_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def coerce(key, value):
    """Convert a string (from the command line) or TOML value to the key's type."""
    attr = KEYS[key]
    typ = str(_TYPES[attr])
    if value is None:
        return None
    if "bool" in typ:
        if isinstance(value, str):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return bool(value)
    try:
        if "int" in typ:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if "float" in typ:
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r}") from None
    return str(value)


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Defaults, then the TOML file, then ``overrides`` (dotted key -> value)."""
    values = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except (OSError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        values.update(_flatten(raw))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = PipelineConfig(**{KEYS[k]: coerce(k, v) for k, v in values.items()})
    return cfg.validate()
