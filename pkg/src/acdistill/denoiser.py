"""Conditional U-net noise predictor shared by teacher and student.

The condition image is concatenated to the noisy target at the input layer;
the step index enters through a sinusoidal embedding added inside every
residual block.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError, check_finite


@dataclass(frozen=True)
class DenoiserConfig:
    target_channels: int = 3
    condition_channels: int = 1
    base_width: int = 64
    depth: int = 3
    time_embed_dim: int | None = None
    tile_size: int = 64

    def __post_init__(self):
        if self.target_channels < 1 or self.condition_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if self.base_width < 1 or self.depth < 0:
            raise ValueError("base_width must be >= 1 and depth >= 0")
        if self.tile_size % (2**self.depth) != 0:
            raise ValueError(f"tile_size {self.tile_size} not divisible by 2**depth = {2**self.depth}")
        if self.time_embed_dim is None:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_width)

    def level_widths(self) -> list[int]:
        """Channel width at each resolution level, finest first; the last entry is the bottleneck."""
        return [self.base_width * min(2**i, 4) for i in range(self.depth + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0 and ch >= g:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Level(nn.Module):
    """Two residual blocks at one resolution."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.block1 = ResBlock(in_ch, out_ch, temb_dim)
        self.block2 = ResBlock(out_ch, out_ch, temb_dim)

    def forward(self, x, temb=None):
        return self.block2(self.block1(x, temb), temb)


class Encoder(nn.Module):
    """Input stem, downsampling levels and bottleneck.

    This is the part of the U-net that the discriminator reuses.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        widths = cfg.level_widths()
        temb = cfg.time_embed_dim
        self.stem = nn.Conv2d(cfg.target_channels + cfg.condition_channels, widths[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = widths[0]
        for i in range(cfg.depth):
            self.levels.append(Level(ch, widths[i], temb))
            ch = widths[i]
            self.downs.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        self.mid = Level(ch, widths[-1], temb)
        self.out_channels = widths[-1]

    def forward(self, x, temb=None):
        h = self.stem(x)
        skips = []
        for level, down in zip(self.levels, self.downs):
            h = level(h, temb)
            skips.append(h)
            h = down(h)
        return self.mid(h, temb), skips


class Denoiser(nn.Module):
    """U-net mapping ``(x_t, t, cond)`` to predicted noise of ``x_t``'s shape."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = config.level_widths()
        temb = config.time_embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(config.base_width, temb),
            nn.SiLU(),
            nn.Linear(temb, temb),
        )
        self.encoder = Encoder(config)
        self.ups = nn.ModuleList()
        self.dec_levels = nn.ModuleList()
        ch = widths[-1]
        for i in reversed(range(config.depth)):
            self.ups.append(nn.Conv2d(ch, widths[i], 3, padding=1))
            self.dec_levels.append(Level(2 * widths[i], widths[i], temb))
            ch = widths[i]
        self.out_norm = nn.GroupNorm(_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, config.target_channels, 3, padding=1)

    def embed_time(self, t: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.config.base_width).to(self.out_conv.weight.dtype)
        return self.time_mlp(emb)

    def forward(self, x_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        if not isinstance(t, torch.Tensor) or t.ndim == 0:
            t = torch.full((x_t.shape[0],), int(t), device=x_t.device)
        temb = self.embed_time(t.to(x_t.device))
        h, skips = self.encoder(torch.cat([x_t, cond], dim=1), temb)
        for up, level, skip in zip(self.ups, self.dec_levels, reversed(skips)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = level(torch.cat([h, skip], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(h)))


def init_denoiser(config: DenoiserConfig, seed: int = 0) -> Denoiser:
    """Build a denoiser whose initial weights depend only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Denoiser(config)


def clone_weights(src: nn.Module) -> nn.Module:
    """Independent deep copy (student and discriminator start from the teacher)."""
    return copy.deepcopy(src)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict_noise(model, x_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
    """Run ``model`` as a noise predictor with shape and finiteness checks."""
    if x_t.ndim != 4 or cond.ndim != 4:
        raise ShapeMismatchError("expected NCHW tensors")
    if x_t.shape[0] != cond.shape[0] or x_t.shape[-2:] != cond.shape[-2:]:
        raise ShapeMismatchError(f"x_t {tuple(x_t.shape)} vs cond {tuple(cond.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim == 1 and t.shape[0] != x_t.shape[0]:
        raise ShapeMismatchError(f"{t.shape[0]} steps for batch of {x_t.shape[0]}")
    eps = model(x_t, t, cond)
    if eps.shape != x_t.shape:
        raise ShapeMismatchError(f"prediction {tuple(eps.shape)} vs x_t {tuple(x_t.shape)}")
    check_finite(eps, "noise prediction")
    return eps
