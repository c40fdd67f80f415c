"""Conditional discriminator built from a denoiser's downsampling half, and hinge losses."""

from __future__ import annotations

import copy
from contextlib import contextmanager

import torch
import torch.nn as nn

from .denoiser import Denoiser
from .errors import ShapeMismatchError, check_finite


class Discriminator(nn.Module):
    """Encoder levels + bottleneck of a U-net, followed by pool and an affine head.

    Sees the channel concatenation ``[image, cond]`` and no step index.
    """

    def __init__(self, encoder: nn.Module, head_init_std: float = 1e-3):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.out_channels, 1)
        nn.init.normal_(self.head.weight, std=head_init_std)
        nn.init.zeros_(self.head.bias)

    @classmethod
    def from_denoiser(cls, denoiser: Denoiser, head_seed: int = 0, head_init_std: float = 1e-3) -> "Discriminator":
        """Copy the encoder and bottleneck of ``denoiser``; the head is freshly initialized."""
        encoder = copy.deepcopy(denoiser.encoder)
        encoder.requires_grad_(True)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(head_seed)
            disc = cls(encoder, head_init_std)
        disc.config = denoiser.config
        return disc

    def forward(self, img: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        h, _ = self.encoder(torch.cat([img, cond], dim=1), None)
        return self.head(h.mean(dim=(2, 3))).squeeze(-1)


def discriminate(disc, img: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Per-sample realness score, shape ``(B,)``."""
    if img.ndim != 4 or cond.ndim != 4:
        raise ShapeMismatchError("expected NCHW tensors")
    if img.shape[0] != cond.shape[0] or img.shape[-2:] != cond.shape[-2:]:
        raise ShapeMismatchError(f"img {tuple(img.shape)} vs cond {tuple(cond.shape)}")
    scores = disc(img, cond)
    check_finite(scores, "discriminator scores")
    return scores


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    if real_scores.shape != fake_scores.shape:
        raise ShapeMismatchError("real and fake score batches differ")
    return torch.relu(1.0 - real_scores).mean() + torch.relu(1.0 + fake_scores).mean()


def hinge_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    return -fake_scores.mean()


def d_loss(disc, real: torch.Tensor, fake: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge loss; ``fake`` is detached so no gradient reaches the generator."""
    if real.shape != fake.shape:
        raise ShapeMismatchError(f"real {tuple(real.shape)} vs fake {tuple(fake.shape)}")
    return hinge_d_loss(discriminate(disc, real, cond), discriminate(disc, fake.detach(), cond))


def g_adv_loss(disc, fake: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Generator hinge loss ``-mean D(fake, cond)``; the discriminator is frozen while it is built."""
    with frozen(disc):
        return hinge_g_loss(discriminate(disc, fake, cond))


@contextmanager
def frozen(module: nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    module.requires_grad_(False)
    try:
        yield module
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)
