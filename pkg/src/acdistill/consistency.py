"""Consistency-function parameterization and the distillation training step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .denoiser import predict_noise
from .errors import FrozenTeacherError, NumericalHealthError, StepRangeError
from .schedule import NoiseSchedule, _as_index, _per_sample, forward_diffuse, x0_from_eps

SKIP_FORMS = ("rational", "index")


@dataclass(frozen=True)
class ConsistencyParams:
    """Boundary step and coefficient family of the consistency function.

    ``rational`` uses the schedule noise level ``sqrt((1-ᾱ_t)/ᾱ_t)`` (shifted so
    that it vanishes at ``t_min``) inside ``σd²/(σ²+σd²)`` and ``σd·σ/sqrt(σ²+σd²)``.
    ``index`` replaces σ with ``index_scale·(t - t_min)`` and drops the σd factor
    from ``c_out``, so ``c_out -> 1`` and the output is essentially the clean
    estimate one step past the boundary.

    ``clip_target`` projects the teacher's estimate onto the data range before
    it becomes a regression target.  Far from the boundary ``1/sqrt(ᾱ_t)``
    multiplies small noise errors by two orders of magnitude, and unprojected
    targets swamp the loss.  ``f`` itself is never clamped.
    """

    t_min: int = 1
    sigma_data: float = 0.5
    skip_form: str = "rational"
    index_scale: float = 10.0
    clip_target: bool = True

    def __post_init__(self):
        if self.t_min < 1:
            raise ValueError("t_min must be >= 1 (the clean estimate is undefined at step 0)")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")
        if self.skip_form not in SKIP_FORMS:
            raise ValueError(f"skip_form must be one of {SKIP_FORMS}, got {self.skip_form!r}")


def rational_coefficients(sigma, sigma_data: float):
    """``(c_skip, c_out)`` for noise level ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    denom = sigma**2 + sigma_data**2
    return sigma_data**2 / denom, sigma_data * sigma / np.sqrt(denom)


def noise_level(sched: NoiseSchedule, t) -> np.ndarray:
    ab = np.asarray(sched.alpha_bar(t), dtype=np.float64)
    return np.sqrt((1.0 - ab) / ab)


def _coefficients(params: ConsistencyParams, sched: NoiseSchedule, t):
    t = np.asarray(_as_index(t))
    if np.any(t < params.t_min) or np.any(t > sched.T):
        raise StepRangeError(f"step {t} outside [{params.t_min}, {sched.T}]")
    sd = params.sigma_data
    if params.skip_form == "rational":
        sigma = noise_level(sched, t) - noise_level(sched, params.t_min)
        return rational_coefficients(sigma, sd)
    s = params.index_scale * (t - params.t_min).astype(np.float64)
    denom = s**2 + sd**2
    return sd**2 / denom, s / np.sqrt(denom)


def c_skip(params: ConsistencyParams, sched: NoiseSchedule, t):
    out = _coefficients(params, sched, t)[0]
    return float(out) if np.ndim(out) == 0 else out


def c_out(params: ConsistencyParams, sched: NoiseSchedule, t):
    out = _coefficients(params, sched, t)[1]
    return float(out) if np.ndim(out) == 0 else out


def consistency_fn(model, params: ConsistencyParams, sched: NoiseSchedule, x_t, t, cond) -> torch.Tensor:
    """``c_skip(t)·x_t + c_out(t)·x̂0`` where ``x̂0`` comes from the model's noise prediction.

    Returns ``x_t`` unchanged wherever ``t == t_min``.
    """
    cs, co = _coefficients(params, sched, t)
    at_min = np.asarray(_as_index(t)) == params.t_min
    if at_min.ndim == 0 and at_min:
        return x_t
    eps = predict_noise(model, x_t, t, cond)
    x0_hat = x0_from_eps(sched, x_t, eps, t)
    out = _per_sample(cs, x_t) * x_t + _per_sample(co, x_t) * x0_hat
    if at_min.ndim and at_min.any():
        mask = torch.as_tensor(at_min, device=x_t.device).view(-1, *([1] * (x_t.ndim - 1)))
        out = torch.where(mask, x_t, out)
    return out


@dataclass
class DistillLossReport:
    l_consistency: torch.Tensor
    l_adv_g: torch.Tensor
    l_total: torch.Tensor
    lambda_adv: float
    t_sampled: torch.Tensor
    pred_teacher: torch.Tensor
    pred_student: torch.Tensor
    d_loss: float | None = None

    def as_log(self) -> dict:
        return {
            "l_consistency": self.l_consistency.item(),
            "l_adv_g": self.l_adv_g.item(),
            "adv_contribution": self.lambda_adv * self.l_adv_g.item(),
            "l_total": self.l_total.item(),
            "d_loss": self.d_loss,
        }


def _check_frozen(teacher) -> None:
    if teacher.training:
        raise FrozenTeacherError("teacher must be in eval mode")
    if any(p.requires_grad for p in teacher.parameters()):
        raise FrozenTeacherError("teacher parameters must not require grad")


def distill_step(
    student,
    teacher,
    disc,
    batch,
    sched: NoiseSchedule,
    params: ConsistencyParams,
    lambda_adv: float,
    rng: torch.Generator,
    *,
    skip: int = 1,
    t: torch.Tensor | None = None,
    update_disc: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], float] | None = None,
) -> DistillLossReport:
    """One distillation forward pass; gradients of ``l_total`` reach only the student.

    ``batch`` is ``(target, cond)``.  The teacher denoises ``x_t`` in one step,
    its estimate is re-noised to ``t - skip`` and the student denoises that.
    ``skip=0`` makes the student see the teacher's exact input (a test hook).
    ``update_disc(real, fake, cond)``, when given, runs after the student
    forward pass and before the adversarial term, so a discriminator update
    can precede the student update within the same batch.
    """
    from .adversary import g_adv_loss

    _check_frozen(teacher)
    if lambda_adv < 0:
        raise ValueError("lambda_adv must be >= 0")
    if skip < 0:
        raise ValueError("skip must be >= 0")
    x0, cond = batch
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    b = x0.shape[0]
    device = x0.device
    lo = params.t_min + max(skip, 1)
    if t is None:
        t = torch.randint(lo, sched.T + 1, (b,), generator=rng)
    t = t.to(torch.long).cpu()
    z1 = torch.randn(x0.shape, generator=rng, dtype=x0.dtype).to(device)
    z2 = torch.randn(x0.shape, generator=rng, dtype=x0.dtype).to(device)

    x_t = forward_diffuse(sched, x0, t, z1)
    with torch.no_grad():
        pred_t = consistency_fn(teacher, params, sched, x_t, t, cond)
        if params.clip_target:
            pred_t = pred_t.clamp(-1.0, 1.0)
    t_prev = t - skip
    x_prev = x_t if skip == 0 else forward_diffuse(sched, pred_t, t_prev, z2)
    pred_s = consistency_fn(student, params, sched, x_prev, t_prev.clamp(min=params.t_min), cond)
    l_cons = (pred_t - pred_s).pow(2).mean()

    d_val = None
    if update_disc is not None:
        d_val = update_disc(x0, pred_s.detach(), cond)
    if disc is not None:
        l_adv = g_adv_loss(disc, pred_s, cond)
    else:
        l_adv = torch.zeros((), dtype=l_cons.dtype, device=device)
    l_total = l_cons + lambda_adv * l_adv
    if not bool(torch.isfinite(l_total)):
        raise NumericalHealthError(
            f"non-finite distillation loss (consistency={l_cons.item()}, adv={l_adv.item()}, t={t.tolist()})"
        )
    return DistillLossReport(
        l_consistency=l_cons,
        l_adv_g=l_adv,
        l_total=l_total,
        lambda_adv=float(lambda_adv),
        t_sampled=t,
        pred_teacher=pred_t,
        pred_student=pred_s,
        d_loss=d_val,
    )


@torch.no_grad()
def ema_update(target, online, decay: float):
    """``target <- decay·target + (1-decay)·online`` in place; accepts modules or tensor lists."""
    if not (0.0 <= decay < 1.0):
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    tgt = list(target.parameters()) if hasattr(target, "parameters") else list(target)
    src = list(online.parameters()) if hasattr(online, "parameters") else list(online)
    if len(tgt) != len(src) or any(a.shape != b.shape for a, b in zip(tgt, src)):
        raise ValueError("parameter trees are not congruent")
    for a, b in zip(tgt, src):
        a.mul_(decay).add_(b.detach(), alpha=1.0 - decay)
    return target


@torch.no_grad()
def self_consistency_gap(model, params: ConsistencyParams, sched: NoiseSchedule, x0, cond, rng, skip: int = 1):
    """Mean squared disagreement of ``f`` between a step and its re-noised neighbour.

    The neighbour of ``x_t`` is built the way distillation builds it: the
    model's own estimate at ``t`` re-noised to ``t - skip``.  With
    ``clip_target`` both estimates are compared after projection onto the data
    range, matching what the distillation loss sees.
    """
    b = x0.shape[0]
    t = torch.randint(params.t_min + max(skip, 1), sched.T + 1, (b,), generator=rng)
    z1 = torch.randn(x0.shape, generator=rng, dtype=x0.dtype).to(x0.device)
    z2 = torch.randn(x0.shape, generator=rng, dtype=x0.dtype).to(x0.device)
    f_t = consistency_fn(model, params, sched, forward_diffuse(sched, x0, t, z1), t, cond)
    if params.clip_target:
        f_t = f_t.clamp(-1.0, 1.0)
    t_prev = t - skip
    f_prev = consistency_fn(model, params, sched, forward_diffuse(sched, f_t, t_prev, z2), t_prev, cond)
    if params.clip_target:
        f_prev = f_prev.clamp(-1.0, 1.0)
    return (f_t - f_prev).pow(2).mean().item()
