"""Training configuration and named presets.

A config is a single JSON document; ``apply_overrides`` lets command-line
``key.sub=value`` pairs replace individual keys.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .consistency import ConsistencyParams
from .denoiser import DenoiserConfig
from .schedule import NoiseSchedule, make_linear_schedule


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_min, self.beta_max)


@dataclass
class OptimConfig:
    """AdamW with linear warmup from zero to ``lr`` and a constant rate afterwards."""

    lr: float = 8e-6
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    warmup: int = 1000
    iters: int = 50_000
    batch_size: int = 16
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup > self.iters:
            raise ValueError("warmup cannot exceed the iteration count")

    def lr_at(self, it: int) -> float:
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, (it + 1) / self.warmup)


@dataclass
class DistillConfig:
    lambda_adv: float = 0.5
    adversarial: bool = True
    t_min: int = 1
    sigma_data: float = 0.5
    skip_form: str = "rational"
    index_scale: float = 10.0
    clip_target: bool = True
    skip: int = 1
    disc_lr_scale: float = 1.0
    ema: bool = False
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if self.disc_lr_scale <= 0:
            raise ValueError("disc_lr_scale must be positive")

    @property
    def uses_discriminator(self) -> bool:
        return self.adversarial and self.lambda_adv > 0

    def params(self) -> ConsistencyParams:
        return ConsistencyParams(self.t_min, self.sigma_data, self.skip_form, self.index_scale, self.clip_target)


@dataclass
class TrainConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    teacher_optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=2e-4, warmup=1000, iters=50_000))
    distill_optim: OptimConfig = field(
        default_factory=lambda: OptimConfig(lr=8e-6, warmup=1000, iters=50_000, grad_clip=1.0)
    )
    train_manifest: str | None = None
    test_manifest: str | None = None
    seed: int = 0
    out_dir: str = "runs/default"
    save_interval: int = 1000
    log_interval: int = 50
    sample_interval: int = 1000
    eval_seed: int = 1234

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _from_dict(cls, d: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in d.items():
        if key not in hints:
            raise KeyError(f"unknown config key {cls.__name__}.{key}")
        sub = _SUBCONFIGS.get((cls, key))
        kwargs[key] = _from_dict(sub, value) if sub is not None and isinstance(value, dict) else value
    return cls(**kwargs)


_SUBCONFIGS = {
    (TrainConfig, "schedule"): ScheduleConfig,
    (TrainConfig, "denoiser"): DenoiserConfig,
    (TrainConfig, "distill"): DistillConfig,
    (TrainConfig, "teacher_optim"): OptimConfig,
    (TrainConfig, "distill_optim"): OptimConfig,
}


def apply_overrides(cfg: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    d = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key}")
        node[parts[-1]] = value
    return TrainConfig.from_dict(d)


def _toy_schedule() -> ScheduleConfig:
    # default β range over 200 steps: ᾱ_T ≈ 0.13, which keeps 1/sqrt(ᾱ_t) small enough for one-step estimates
    return ScheduleConfig(T=200, beta_min=1e-4, beta_max=0.02)


def preset(name: str) -> TrainConfig:
    """``full``: full-resolution hyperparameters; ``toy``: 64px desk-scale run;
    ``desk``: a 16px CPU-sized run used by the acceptance suite."""
    if name == "full":
        return TrainConfig(denoiser=DenoiserConfig(tile_size=256, depth=4))
    if name == "toy":
        return TrainConfig(
            schedule=_toy_schedule(),
            denoiser=DenoiserConfig(base_width=64, depth=3, tile_size=64),
            teacher_optim=OptimConfig(lr=2e-4, warmup=200, iters=5000, batch_size=16),
            distill_optim=OptimConfig(lr=5e-5, warmup=100, iters=2000, batch_size=16, grad_clip=1.0),
            distill=DistillConfig(disc_lr_scale=0.1),
            save_interval=1000,
            sample_interval=500,
        )
    if name == "desk":
        return TrainConfig(
            schedule=_toy_schedule(),
            denoiser=DenoiserConfig(base_width=32, depth=2, tile_size=16),
            teacher_optim=OptimConfig(lr=5e-4, warmup=100, iters=3000, batch_size=16),
            distill_optim=OptimConfig(lr=5e-5, warmup=100, iters=2000, batch_size=16, grad_clip=1.0),
            distill=DistillConfig(disc_lr_scale=0.1),
            save_interval=1000,
            log_interval=100,
            sample_interval=500,
        )
    raise KeyError(f"unknown preset {name!r} (expected full, toy or desk)")


def clone_config(cfg: TrainConfig) -> TrainConfig:
    return copy.deepcopy(cfg)
