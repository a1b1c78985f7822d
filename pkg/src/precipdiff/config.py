"""Run configuration: one flat record of every tunable, validated at load.

Configs are JSON files; any key may be overridden by the command-line flag of
the same name (underscores become dashes).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .condition import ExpTransform, GridSpec, LogisticTransform
from .schedule import make_schedule
from .synthgen import SynthConfig
from .unet import UNetConfig

METHODS = ("ddpm", "rf", "supervised")
SAMPLERS = ("ddim", "ancestral")
SCHEDULES = ("linear", "cosine")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass(frozen=True)
class RunConfig:
    # grid
    L: int = 3
    H: int = 16
    W: int = 32
    # diffusion
    T: int = 200
    schedule: str = "linear"
    beta_min: float = 5e-4
    beta_max: float = 0.1
    cosine_s: float = 0.008
    sampler: str = "ddim"
    sampler_steps: int = 50
    method: str = "ddpm"
    # network
    base_channels: int = 16
    p_drop: float = 0.2
    # optimisation
    lr: float = 1e-3
    weight_decay: float = 1e-4
    epochs: int = 200
    batch: int = 8
    ema_decay: float = 0.995
    augment: bool = True
    lat_eps: float = 0.01
    # transforms
    x_p: float = 5.0
    p_s: float = 0.99
    ir_low: float = 270.0
    ir_high: float = 230.0
    topo_low: float = 200.0
    topo_high: float = 2000.0
    # ensemble and evaluation
    K: int = 16
    # synthetic corpus
    n_train: int = 64
    n_eval: int = 12
    n_blobs: int = 3
    blob_scale: float = 2.5
    velocity_lat: float = 0.0
    velocity_lon: float = 1.5
    swath_width: float = 8.0
    swath_count: int = 2
    swath_shift: float = 5.0
    # seeds
    seed: int = 0
    data_seed: int = 1
    eval_seed: int = 2
    sample_seed: int = 3

    def __post_init__(self):
        try:
            self.validate()
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def validate(self) -> None:
        GridSpec(self.L, self.H, self.W)
        if self.H % 8 or self.W % 8:
            raise ConfigError(f"H and W must be divisible by 8, got {self.H}x{self.W}")
        for name, allowed in (("schedule", SCHEDULES), ("sampler", SAMPLERS), ("method", METHODS)):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        self.noise_schedule()
        self.unet_config()
        self.synth_config("train")
        ExpTransform(self.x_p, self.p_s)
        if not (0 < self.p_s < 1 and self.x_p > 0):
            raise ConfigError("need x_p > 0 and 0 < p_s < 1")
        if self.ir_low == self.ir_high or self.topo_low == self.topo_high:
            raise ConfigError("logistic thresholds must differ")
        checks = {
            "sampler_steps": 1 <= self.sampler_steps <= self.T,
            "lr": self.lr > 0,
            "weight_decay": self.weight_decay >= 0,
            "epochs": self.epochs >= 0,
            "batch": self.batch >= 1,
            "ema_decay": 0 < self.ema_decay < 1,
            "lat_eps": 0 <= self.lat_eps <= 1,
            "K": self.K >= 1,
            "n_train": self.n_train >= 1,
            "n_eval": self.n_eval >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ConfigError("out of range: " + ", ".join(f"{k}={getattr(self, k)!r}" for k in bad))

    # derived objects

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.L, self.H, self.W)

    def noise_schedule(self):
        if self.schedule == "linear":
            return make_schedule("linear", self.T, beta_min=self.beta_min, beta_max=self.beta_max)
        return make_schedule("cosine", self.T, s=self.cosine_s)

    def unet_config(self) -> UNetConfig:
        return UNetConfig(base_channels=self.base_channels, p_drop=self.p_drop, with_time=self.method != "supervised")

    def exp_transform(self) -> ExpTransform:
        return ExpTransform(self.x_p, self.p_s)

    def ir_transform(self) -> LogisticTransform:
        return LogisticTransform(x_low=self.ir_low, x_high=self.ir_high)

    def topo_transform(self) -> LogisticTransform:
        return LogisticTransform(x_low=self.topo_low, x_high=self.topo_high)

    def synth_config(self, split: str) -> SynthConfig:
        seed = {"train": self.data_seed, "eval": self.eval_seed}[split]
        return SynthConfig(
            L=self.L, H=self.H, W=self.W, n_blobs=self.n_blobs, blob_scale=self.blob_scale,
            velocity=(self.velocity_lat, self.velocity_lon), swath_width=self.swath_width,
            swath_count=self.swath_count, swath_shift=self.swath_shift, seed=seed,
        )

    # serialisation

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        out = {}
        for k, v in d.items():
            out[k] = _coerce(known[k], v)
        return cls(**out)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _coerce(f: dataclasses.Field, v):
    kind = type(f.default)
    try:
        if kind is bool:
            if isinstance(v, str):
                if v.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(v)
                return v.lower() in ("true", "1", "yes")
            return bool(v)
        if kind is int:
            if isinstance(v, float) and not v.is_integer():
                raise ValueError(v)
            return int(v)
        return kind(v)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key {f.name!r}: cannot read {v!r} as {kind.__name__}") from e


def load_config(path: Optional[str | Path] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Defaults, then the JSON file (if any), then overrides."""
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig.from_dict(d)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    from .gridfile import atomic_write_text

    atomic_write_text(path, json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--key`` flag per RunConfig field; unset flags leave the file/default value."""
    group = parser.add_argument_group("run config overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(f.default)
        if kind is bool:
            group.add_argument(flag, dest=f.name, default=None, choices=("true", "false"), help=f"(default {f.default})")
        else:
            group.add_argument(flag, dest=f.name, default=None, type=str, metavar=kind.__name__.upper(),
                               help=f"(default {f.default})")


def overrides_from_args(args: argparse.Namespace) -> dict:
    return {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}


CONFIG_KEYS: Sequence[str] = tuple(f.name for f in fields(RunConfig))
