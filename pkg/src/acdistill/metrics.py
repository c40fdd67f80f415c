"""PSNR, SSIM and a Fréchet distance over a pluggable feature embedder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError


@dataclass
class MetricReport:
    psnr_db: list[float]
    ssim: list[float]
    ids: list[str]
    fid_proxy: float | None
    embedder_id: str | None
    extra: dict = field(default_factory=dict)

    @property
    def n_tiles(self) -> int:
        return len(self.psnr_db)

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim))

    def summary(self) -> dict:
        return {
            "n_tiles": self.n_tiles,
            "psnr_db": self.psnr_mean,
            "ssim": self.ssim_mean,
            "fid_proxy": self.fid_proxy,
            "embedder_id": self.embedder_id,
            **self.extra,
        }


def _as_f64(x) -> torch.Tensor:
    return torch.as_tensor(x).detach().to("cpu", torch.float64)


def psnr(a, b, data_range: float) -> float:
    """``10·log10(range²/MSE)`` in dB; ``math.inf`` when the images are identical."""
    a, b = _as_f64(a), _as_f64(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float((a - b).pow(2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    r = size // 2
    x = torch.arange(-r, r + 1, dtype=torch.float64)
    w = torch.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def ssim(a, b, data_range: float, k1: float = 0.01, k2: float = 0.03, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions and channels.

    Accepts ``(H, W)``, ``(C, H, W)`` or ``(N, C, H, W)``; statistics use a
    separable Gaussian window and population (biased) variances.
    """
    a, b = _as_f64(a), _as_f64(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"tile {tuple(a.shape[-2:])} smaller than the {window}px window")
    a = a.reshape(-1, 1, *a.shape[-2:])
    b = b.reshape(-1, 1, *b.shape[-2:])
    g = gaussian_window(window, sigma)
    gx, gy = g.view(1, 1, 1, -1), g.view(1, 1, -1, 1)

    def blur(x):
        return F.conv2d(F.conv2d(x, gx), gy)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return float(s.mean())


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, cov1, mu2, cov2, sym_tol: float = 1e-6) -> float:
    """``|mu1-mu2|² + tr(C1 + C2 - 2·(C1·C2)^½)`` for Gaussian fits."""
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    c1, c2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    if mu1.shape != mu2.shape or c1.shape != c2.shape or c1.shape != (mu1.size, mu1.size):
        raise ShapeMismatchError("mean/covariance dimensions are not congruent")
    for c in (c1, c2):
        if not np.allclose(c, c.T, rtol=0, atol=sym_tol * max(1.0, np.abs(c).max())):
            raise ValueError("covariance matrix is not symmetric")
    # tr (C1 C2)^½ = tr (C1^½ C2 C1^½)^½, which stays symmetric PSD
    s1 = _psd_sqrt(c1)
    w = np.linalg.eigvalsh(s1 @ c2 @ s1)
    tr_covmean = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(c1) + np.trace(c2) - 2.0 * tr_covmean)


class ConvEmbedder(nn.Module):
    """Small fixed random convolutional feature extractor for the FID proxy."""

    def __init__(self, in_channels: int = 3, dim: int = 32, seed: int = 0):
        super().__init__()
        if dim % 2:
            raise ValueError("embedding dim must be even (mean and std halves)")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(
                nn.Conv2d(in_channels, 16, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1),
                nn.SiLU(),
                nn.Conv2d(32, dim // 2, 3, stride=2, padding=1),
                nn.SiLU(),
            )
            # He-normal keeps feature magnitudes O(1) so distances are not crushed toward zero
            for m in self.net:
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        self.requires_grad_(False)
        self.eval()
        self.dim = dim
        self.id = f"conv-rand-d{dim}-s{seed}"

    @torch.no_grad()
    def forward(self, x):
        h = self.net(x.float())
        # mean and std pooling keep both colour and texture statistics
        return torch.cat([h.mean(dim=(2, 3)), h.std(dim=(2, 3))], dim=1)


def feature_stats(images, embedder, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    feats = torch.cat([embedder(images[i : i + batch]) for i in range(0, len(images), batch)])
    f = feats.to(torch.float64).numpy()
    return f.mean(axis=0), np.cov(f, rowvar=False)


def fid_proxy(real_set, fake_set, embedder=None) -> float:
    """Fréchet distance between Gaussian fits of embedder features of the two sets."""
    embedder = embedder or ConvEmbedder(in_channels=real_set.shape[1])
    need = embedder.dim + 1
    if len(real_set) < need or len(fake_set) < need:
        raise ValueError(f"need at least {need} images per set for a full-rank covariance, got {len(real_set)}/{len(fake_set)}")
    m1, c1 = feature_stats(real_set, embedder)
    m2, c2 = feature_stats(fake_set, embedder)
    return frechet_distance(m1, c1, m2, c2)


def to_unit(x: torch.Tensor) -> torch.Tensor:
    """``[-1, 1] -> [0, 1]``."""
    return (x.clamp(-1, 1) + 1.0) / 2.0


def score_tiles(preds, truths, ids, embedder=None) -> MetricReport:
    """Per-tile PSNR/SSIM on ``[0, 1]`` images plus the FID proxy when the set is large enough."""
    if preds.shape != truths.shape:
        raise ShapeMismatchError(f"{tuple(preds.shape)} vs {tuple(truths.shape)}")
    p01, t01 = to_unit(preds), to_unit(truths)
    side = min(preds.shape[-2:])
    # tiles below the standard 11px window fall back to the largest odd window that fits
    window = 11 if side >= 11 else side - (1 - side % 2)
    ps = [psnr(p, t, 1.0) for p, t in zip(p01, t01)]
    ss = [ssim(p, t, 1.0, window=window) for p, t in zip(p01, t01)]
    embedder = embedder or ConvEmbedder(in_channels=preds.shape[1])
    fid = fid_proxy(truths, preds, embedder) if len(preds) > embedder.dim else None
    return MetricReport(ps, ss, list(ids), fid, embedder.id)

