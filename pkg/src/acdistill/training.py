"""Teacher pre-training and the adversarial consistency distillation loop."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adversary import Discriminator, d_loss
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import OptimConfig, TrainConfig
from .consistency import distill_step, ema_update
from .data import DatasetManifest, load_manifest, sample_batch
from .denoiser import Denoiser, DenoiserConfig, clone_weights, init_denoiser, predict_noise
from .errors import NumericalHealthError
from .schedule import forward_diffuse

log = logging.getLogger(__name__)


class ScheduleMismatchError(ValueError):
    pass


def iteration_rngs(seed: int, it: int) -> tuple[np.random.Generator, torch.Generator]:
    """Generators derived from ``(seed, iteration)`` so a resumed run replays the same draws."""
    ss = np.random.SeedSequence([int(seed), int(it)])
    np_rng = np.random.default_rng(ss)
    torch_seed = int(ss.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)
    return np_rng, torch.Generator().manual_seed(torch_seed)


def make_optimizer(params, oc: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(params, lr=oc.lr_at(0), betas=(oc.beta1, oc.beta2), weight_decay=oc.weight_decay)


def _set_lr(opt, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def model_from_checkpoint(ckpt: Checkpoint, group: str = "model") -> Denoiser:
    cfg = DenoiserConfig.from_dict(ckpt.config["denoiser"])
    model = Denoiser(cfg)
    model.load_state_dict(ckpt.group(group))
    return model


def load_model(path, use_ema: bool = False) -> tuple[Denoiser, Checkpoint]:
    ckpt = load_checkpoint(path)
    group = "ema" if use_ema and ckpt.has_group("ema") else "model"
    model = model_from_checkpoint(ckpt, group)
    model.eval()
    return model, ckpt


def _load_train_data(cfg: TrainConfig):
    if not cfg.train_manifest:
        raise ValueError("config has no train_manifest")
    manifest = DatasetManifest.load(cfg.train_manifest)
    targets, conds, _ = load_manifest(manifest)
    if targets.shape[-1] != cfg.denoiser.tile_size:
        raise ValueError(f"dataset tile size {targets.shape[-1]} != model tile_size {cfg.denoiser.tile_size}")
    return targets, conds


class JsonlLog:
    def __init__(self, path: Path, resume_from: int | None = None):
        self.path = path
        lines = []
        if resume_from is not None and path.exists():
            lines = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["iter"] < resume_from]
        path.write_text("".join(ln + "\n" for ln in lines))
        self._f = open(path, "a")

    def write(self, rec: dict) -> None:
        self._f.write(json.dumps(rec) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def read_log(path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln]


def _echo_config(cfg: TrainConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")


def train_teacher(cfg: TrainConfig, resume: str | Path | None = None) -> Checkpoint:
    """Conditional DDPM training: minimize ``MSE(ε̂, ε)`` at uniformly drawn steps."""
    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    targets, conds = _load_train_data(cfg)
    sched = cfg.schedule.build()
    oc = cfg.teacher_optim
    model = init_denoiser(cfg.denoiser, cfg.seed)
    opt = make_optimizer(model.parameters(), oc)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.schedule != sched:
            raise ScheduleMismatchError("resume checkpoint schedule differs from config")
        model.load_state_dict(ck.group("model"))
        ck.load_optimizer("optim", opt)
        start = ck.iteration
    model.train()
    logf = JsonlLog(out / "teacher_log.jsonl", resume_from=start)

    def snapshot(it: int) -> Checkpoint:
        ck = Checkpoint("teacher", cfg.to_dict(), sched, iteration=it, rng={"seed": cfg.seed, "next_iter": it})
        ck.put_state("model", model.state_dict())
        ck.put_optimizer("optim", opt)
        return ck

    try:
        for it in range(start, oc.iters):
            np_rng, gen = iteration_rngs(cfg.seed, it)
            x0, c = sample_batch(targets, conds, oc.batch_size, np_rng)
            t = torch.randint(1, sched.T + 1, (oc.batch_size,), generator=gen)
            noise = torch.randn(x0.shape, generator=gen)
            eps = predict_noise(model, forward_diffuse(sched, x0, t, noise), t, c)
            loss = F.mse_loss(eps, noise)
            if not torch.isfinite(loss):
                raise NumericalHealthError(f"teacher loss is {loss.item()} at iteration {it} (steps {t.tolist()})")
            lr = oc.lr_at(it)
            _set_lr(opt, lr)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if oc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), oc.grad_clip)
            opt.step()
            loss_v = loss.item()
            logf.write({"iter": it, "loss": loss_v, "lr": lr})
            if (it + 1) % cfg.log_interval == 0:
                log.info("teacher iter %d loss %.4f", it + 1, loss_v)
            if cfg.save_interval and (it + 1) % cfg.save_interval == 0 and it + 1 < oc.iters:
                save_checkpoint(snapshot(it + 1), out / f"teacher_{it + 1:06d}.ckpt")
    finally:
        logf.close()
    ck = snapshot(oc.iters)
    save_checkpoint(ck, out / "teacher.ckpt")
    return ck


def run_distill(cfg: TrainConfig, teacher_ckpt: str | Path) -> tuple[Checkpoint, Checkpoint | None]:
    """Alternate one discriminator and one student update per batch.

    Returns the student checkpoint and, when adversarial training is on, the
    discriminator checkpoint.  ``lambda_adv == 0`` or ``adversarial = false``
    reduces to plain consistency distillation without a discriminator.
    """
    from .evaluation import emit_sample_grid

    out = Path(cfg.out_dir)
    _echo_config(cfg, out)
    sched = cfg.schedule.build()
    teacher, tck = load_model(teacher_ckpt)
    if tck.schedule != sched:
        raise ScheduleMismatchError(
            f"teacher schedule {tck.schedule.to_dict()} does not match config {sched.to_dict()}"
        )
    teacher.requires_grad_(False)
    teacher.eval()
    targets, conds = _load_train_data(cfg)
    dc, oc = cfg.distill, cfg.distill_optim
    params = dc.params()
    lambda_adv = dc.lambda_adv if dc.adversarial else 0.0

    student = clone_weights(teacher)
    student.requires_grad_(True)
    student.train()
    opt_s = make_optimizer(student.parameters(), oc)
    disc = opt_d = None
    if dc.uses_discriminator:
        disc = Discriminator.from_denoiser(teacher, head_seed=cfg.seed)
        disc.train()
        opt_d = make_optimizer(disc.parameters(), oc)
    ema = clone_weights(student).requires_grad_(False) if dc.ema else None

    def update_disc(real, fake, cond) -> float:
        opt_d.zero_grad(set_to_none=True)
        loss = d_loss(disc, real, fake, cond)
        if not torch.isfinite(loss):
            raise NumericalHealthError(f"discriminator loss is {loss.item()}")
        loss.backward()
        if oc.grad_clip:
            torch.nn.utils.clip_grad_norm_(disc.parameters(), oc.grad_clip)
        opt_d.step()
        return loss.item()

    logf = JsonlLog(out / "distill_log.jsonl")
    test_manifest = DatasetManifest.load(cfg.test_manifest) if cfg.test_manifest else None
    try:
        for it in range(oc.iters):
            np_rng, gen = iteration_rngs(cfg.seed, it)
            batch = sample_batch(targets, conds, oc.batch_size, np_rng)
            lr = oc.lr_at(it)
            _set_lr(opt_s, lr)
            if opt_d is not None:
                _set_lr(opt_d, lr * dc.disc_lr_scale)
            rep = distill_step(
                student, teacher, disc, batch, sched, params, lambda_adv, gen,
                skip=dc.skip, update_disc=update_disc if disc is not None else None,
            )
            opt_s.zero_grad(set_to_none=True)
            rep.l_total.backward()
            if oc.grad_clip:
                torch.nn.utils.clip_grad_norm_(student.parameters(), oc.grad_clip)
            opt_s.step()
            if ema is not None:
                ema_update(ema, student, dc.ema_decay)
            logf.write({"iter": it, "lr": lr, **rep.as_log()})
            if (it + 1) % cfg.log_interval == 0:
                log.info("distill iter %d consistency %.5f adv %.4f total %.5f", it + 1,
                         rep.l_consistency.item(), rep.l_adv_g.item(), rep.l_total.item())
            if test_manifest is not None and cfg.sample_interval and (it + 1) % cfg.sample_interval == 0:
                emit_sample_grid(student, cfg, sched, test_manifest, out / "samples" / f"iter_{it + 1:06d}.png")
    finally:
        logf.close()

    student.eval()
    sck = Checkpoint("student", cfg.to_dict(), sched, iteration=oc.iters, rng={"seed": cfg.seed, "next_iter": oc.iters},
                     extra={"teacher": str(teacher_ckpt)})
    sck.put_state("model", student.state_dict())
    if ema is not None:
        sck.put_state("ema", ema.state_dict())
    save_checkpoint(sck, out / "student.ckpt")
    dck = None
    if disc is not None:
        dck = Checkpoint("discriminator", cfg.to_dict(), sched, iteration=oc.iters, rng={"seed": cfg.seed})
        dck.put_state("model", disc.state_dict())
        save_checkpoint(dck, out / "discriminator.ckpt")
    if test_manifest is not None:
        emit_sample_grid(student, cfg, sched, test_manifest, out / "samples" / "final.png")
    return sck, dck
