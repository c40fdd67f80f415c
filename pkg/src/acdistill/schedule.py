"""Discrete variance-preserving noise schedule.

Steps are integers ``0..T``.  ``alpha_bar(0) == 1`` so step 0 is the clean image;
``betas[t - 1]`` is the variance added when moving from ``t - 1`` to ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ShapeMismatchError, StepRangeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    kind: str = "linear"
    beta_min: float = 1e-4
    beta_max: float = 0.02
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    _ab: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 2:
            raise ValueError("schedule needs at least 2 steps")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie in (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "_ab", np.concatenate([[1.0], alpha_bars]))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t) -> np.ndarray | float:
        """ᾱ at step(s) ``t`` (``t = 0`` gives 1)."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise StepRangeError(f"step {t} outside [0, {self.T}]")
        out = self._ab[t]
        return float(out) if out.ndim == 0 else out

    def alpha_bar_tensor(self, t, like: torch.Tensor) -> torch.Tensor:
        """ᾱ_t broadcastable against ``like`` (per-sample when ``t`` is a 1-D tensor)."""
        return _per_sample(self.alpha_bar(_as_index(t)), like)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "linear") != "linear":
            raise ValueError(f"unsupported schedule kind {d['kind']!r}")
        return make_linear_schedule(int(d["T"]), float(d["beta_min"]), float(d["beta_max"]))

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.kind == other.kind and np.array_equal(self.betas, other.betas)

    def __hash__(self):
        return hash((self.kind, self.betas.tobytes()))


def make_linear_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    return NoiseSchedule(betas=betas, kind="linear", beta_min=float(beta_min), beta_max=float(beta_max))


def scaled_linear_range(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> tuple[float, float]:
    """Rescale a 1000-step β range so a ``T``-step chain ends at a similar ᾱ_T."""
    scale = 1000.0 / T
    return beta_min * scale, min(beta_max * scale, 0.999)


def _as_index(t) -> np.ndarray | int:
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().numpy().astype(np.int64)
    return t


def _per_sample(values, like: torch.Tensor) -> torch.Tensor:
    v = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if v.ndim == 1:
        if v.shape[0] != like.shape[0]:
            raise ShapeMismatchError(f"{v.shape[0]} steps for batch of {like.shape[0]}")
        v = v.view(-1, *([1] * (like.ndim - 1)))
    return v


def forward_diffuse(sched: NoiseSchedule, x0: torch.Tensor, t, noise: torch.Tensor) -> torch.Tensor:
    """Corrupt ``x0`` to step ``t``: ``sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·noise``."""
    if x0.shape != noise.shape:
        raise ShapeMismatchError(f"x0 {tuple(x0.shape)} vs noise {tuple(noise.shape)}")
    ab = sched.alpha_bar_tensor(t, x0)
    # ᾱ_0 = 1 exactly, so step 0 reproduces x0 bit-for-bit
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def x0_from_eps(sched: NoiseSchedule, x_t: torch.Tensor, eps_hat: torch.Tensor, t) -> torch.Tensor:
    """Clean-image estimate implied by a noise prediction."""
    if x_t.shape != eps_hat.shape:
        raise ShapeMismatchError(f"x_t {tuple(x_t.shape)} vs eps {tuple(eps_hat.shape)}")
    if np.any(np.asarray(_as_index(t)) < 1):
        raise StepRangeError("x0_from_eps is undefined at step 0")
    ab = sched.alpha_bar_tensor(t, x_t)
    return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def eps_from_x0(sched: NoiseSchedule, x_t: torch.Tensor, x0_hat: torch.Tensor, t) -> torch.Tensor:
    if np.any(np.asarray(_as_index(t)) < 1):
        raise StepRangeError("eps_from_x0 is undefined at step 0")
    ab = sched.alpha_bar_tensor(t, x_t)
    return (x_t - ab.sqrt() * x0_hat) / (1.0 - ab).sqrt()
