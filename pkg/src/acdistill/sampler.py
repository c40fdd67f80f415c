"""Multi-step consistency sampling, DDPM/DDIM baselines and latency timing."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .consistency import ConsistencyParams, consistency_fn
from .denoiser import predict_noise
from .errors import check_finite
from .schedule import NoiseSchedule, forward_diffuse, x0_from_eps


@dataclass(frozen=True)
class SamplerPlan:
    """Re-noising steps ``t_1 > ... > t_{N-1}`` after the initial evaluation at ``T``."""

    steps: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError(f"steps must be strictly decreasing: {steps}")
        object.__setattr__(self, "steps", steps)

    @property
    def n_evals(self) -> int:
        return len(self.steps) + 1

    def validate(self, sched: NoiseSchedule, t_min: int) -> None:
        for s in self.steps:
            if not (t_min < s < sched.T):
                raise ValueError(f"step {s} outside ({t_min}, {sched.T})")


def uniform_plan(n_evals: int, sched: NoiseSchedule, seed: int = 0, t_min: int = 1) -> SamplerPlan:
    """Evenly spaced steps: ``t_n = round(t_min + (T - t_min)·(N - n)/N)`` for ``n = 1..N-1``.

    Rounding is half-up; spacing is at least one step so the result is distinct.
    """
    if n_evals < 1:
        raise ValueError("n_evals must be >= 1")
    T = sched.T
    if n_evals > T - t_min:
        raise ValueError(f"n_evals={n_evals} exceeds the {T - t_min} distinct evaluation levels above t_min={t_min}")
    n = np.arange(1, n_evals)
    steps = np.floor(t_min + (T - t_min) * (n_evals - n) / n_evals + 0.5).astype(int)
    plan = SamplerPlan(tuple(steps.tolist()), seed)
    plan.validate(sched, t_min)
    return plan


def _initial_noise(shape, seed: int, dtype, device) -> tuple[torch.Tensor, torch.Generator]:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(shape, generator=gen, dtype=dtype).to(device), gen


def _output_shape(model, cond: torch.Tensor, target_channels: int | None):
    if target_channels is None:
        target_channels = model.config.target_channels
    return (cond.shape[0], target_channels, *cond.shape[-2:])


@torch.no_grad()
def consistency_sample(
    model,
    params: ConsistencyParams,
    sched: NoiseSchedule,
    cond: torch.Tensor,
    plan: SamplerPlan,
    *,
    renoise: str = "forward",
    literal_eps: float = 0.002,
    clip_denoised: bool = True,
    target_channels: int | None = None,
) -> torch.Tensor:
    """Denoise from pure noise at ``T``, then alternate re-noising and denoising along ``plan``.

    ``renoise="forward"`` re-noises with the forward process at each step.
    ``renoise="literal"`` adds ``sqrt(t_n/t_{n-1} - eps²)·z`` to the current
    estimate, reading the step indices as noise scales.
    """
    plan.validate(sched, params.t_min)
    if renoise not in ("forward", "literal"):
        raise ValueError(f"unknown renoise rule {renoise!r}")
    shape = _output_shape(model, cond, target_channels)
    x_T, gen = _initial_noise(shape, plan.seed, cond.dtype, cond.device)

    def denoise(x_in, t):
        x = consistency_fn(model, params, sched, x_in, t, cond)
        check_finite(x, f"consistency estimate at step {t}")
        return x.clamp(-1.0, 1.0) if clip_denoised else x

    x = denoise(x_T, sched.T)
    prev = sched.T
    for t_n in plan.steps:
        z = torch.randn(shape, generator=gen, dtype=cond.dtype).to(cond.device)
        if renoise == "forward":
            x_hat = forward_diffuse(sched, x, t_n, z)
        else:
            x_hat = x + math.sqrt(max(t_n / prev - literal_eps**2, 0.0)) * z
        x = denoise(x_hat, t_n)
        prev = t_n
    return x.clamp(-1.0, 1.0)


@torch.no_grad()
def ancestral_sample(
    model,
    sched: NoiseSchedule,
    cond: torch.Tensor,
    seed: int = 0,
    *,
    clip_denoised: bool = True,
    target_channels: int | None = None,
) -> torch.Tensor:
    """Full ``T``-step DDPM reverse chain with posterior variance ``β̃_t``."""
    shape = _output_shape(model, cond, target_channels)
    x, gen = _initial_noise(shape, seed, cond.dtype, cond.device)
    ab = sched._ab
    for t in range(sched.T, 0, -1):
        eps = predict_noise(model, x, t, cond)
        x0 = x0_from_eps(sched, x, eps, t)
        if clip_denoised:
            x0 = x0.clamp(-1.0, 1.0)
        beta = sched.betas[t - 1]
        coef_x0 = math.sqrt(ab[t - 1]) * beta / (1.0 - ab[t])
        coef_xt = math.sqrt(1.0 - beta) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
        x = coef_x0 * x0 + coef_xt * x
        if t > 1:
            var = beta * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            x = x + math.sqrt(var) * torch.randn(shape, generator=gen, dtype=cond.dtype).to(cond.device)
        check_finite(x, f"ancestral state at step {t - 1}")
    return x.clamp(-1.0, 1.0)


def ddim_timesteps(T: int, n_steps: int) -> list[int]:
    """``n_steps`` distinct evaluation steps from ``T`` down to 1, evenly spaced."""
    if not (1 <= n_steps <= T):
        raise ValueError(f"n_steps must lie in [1, {T}]")
    if n_steps == 1:
        return [T]
    ts = np.floor(np.linspace(T, 1, n_steps) + 0.5).astype(int)
    return ts.tolist()


@torch.no_grad()
def ddim_sample(
    model,
    sched: NoiseSchedule,
    cond: torch.Tensor,
    n_steps: int,
    eta: float = 0.0,
    seed: int = 0,
    *,
    clip_denoised: bool = True,
    target_channels: int | None = None,
) -> torch.Tensor:
    """DDIM over ``n_steps`` evaluations; with ``eta == 0`` no noise is drawn after ``x_T``."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    shape = _output_shape(model, cond, target_channels)
    x, gen = _initial_noise(shape, seed, cond.dtype, cond.device)
    ts = ddim_timesteps(sched.T, n_steps)
    ab = sched._ab
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = predict_noise(model, x, t, cond)
        x0 = x0_from_eps(sched, x, eps, t)
        if clip_denoised:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (x - math.sqrt(ab[t]) * x0) / math.sqrt(1.0 - ab[t])
        sigma = eta * math.sqrt((1.0 - ab[t_prev]) / (1.0 - ab[t]) * (1.0 - ab[t] / ab[t_prev]))
        x = math.sqrt(ab[t_prev]) * x0 + math.sqrt(max(1.0 - ab[t_prev] - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(shape, generator=gen, dtype=cond.dtype).to(cond.device)
        check_finite(x, f"ddim state at step {t_prev}")
    return x.clamp(-1.0, 1.0)


@dataclass(frozen=True)
class LatencyStats:
    median: float
    mean: float
    std: float
    per_eval: float | None
    samples: tuple[float, ...]


def bench_latency(sample_fn: Callable[[], object], reps: int = 5, warmup: int = 1, n_evals: int | None = None) -> LatencyStats:
    """Wall-clock seconds of ``sample_fn()`` over ``reps`` runs after ``warmup`` discarded runs."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    for _ in range(warmup):
        sample_fn()
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        sample_fn()
        times.append(time.perf_counter() - start)
    med = statistics.median(times)
    return LatencyStats(
        median=med,
        mean=statistics.fmean(times),
        std=statistics.stdev(times),
        per_eval=med / n_evals if n_evals else None,
        samples=tuple(times),
    )
