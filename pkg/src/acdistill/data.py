"""Paired condition/optical tiles: loading, augmentation and a procedural toy set.

Directory convention: ``<root>/<split>/{cond,target}/<id>.png`` with a JSON
manifest ``{root, tile_size, split, pairs: [{cond, target, id}]}``; pair paths
are relative to ``root``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ShapeMismatchError

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class PairedTile:
    cond: torch.Tensor  # (C_c, H, W) in [-1, 1]
    target: torch.Tensor  # (C_t, H, W) in [-1, 1]
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.cond.shape[-2:] != self.target.shape[-2:]:
            raise ShapeMismatchError(f"cond {tuple(self.cond.shape)} vs target {tuple(self.target.shape)}")


@dataclass
class DatasetManifest:
    root: str
    pairs: list[tuple[str, str, str]]
    split: str = "train"
    tile_size: int = 64

    def __post_init__(self):
        ids = [p[2] for p in self.pairs]
        if len(set(ids)) != len(ids):
            raise ValueError("tile ids must be unique")

    def to_json(self) -> dict:
        return {
            "root": str(self.root),
            "tile_size": self.tile_size,
            "split": self.split,
            "pairs": [{"cond": c, "target": t, "id": i} for c, t, i in self.pairs],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        root = Path(d["root"])
        if not root.is_absolute():
            root = (Path(path).parent / root).resolve()
        pairs = [(p["cond"], p["target"], p["id"]) for p in d["pairs"]]
        return cls(root=str(root), pairs=pairs, split=d.get("split", "train"), tile_size=int(d["tile_size"]))

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel

    def check_paths(self) -> None:
        missing = [p for c, t, _ in self.pairs for p in (c, t) if not self.resolve(p).is_file()]
        if missing:
            raise FileNotFoundError(f"{len(missing)} manifest files missing, e.g. {missing[0]}")


def _read_channels(path) -> tuple[np.ndarray, float]:
    """Float channels ``(C, H, W)`` and the pixel-depth maximum of the file."""
    try:
        img = Image.open(path)
        img.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float64)[None]
        vmax = 65535.0
    elif img.mode in ("L", "RGB"):
        arr = np.asarray(img, dtype=np.float64)
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        vmax = 255.0
    else:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1)
        vmax = 255.0
    return arr, vmax


def _resize(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[-2:] == (size, size):
        return arr
    chans = [np.asarray(Image.fromarray(c.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR)) for c in arr]
    return np.stack(chans).astype(np.float64)


def normalize(arr: np.ndarray, vmax: float) -> np.ndarray:
    """Map ``[0, vmax]`` to ``[-1, 1]``."""
    return np.clip(2.0 * (arr / vmax) - 1.0, -1.0, 1.0)


def load_pair(cond_path, target_path, tile_size: int | None, tile_id: str | None = None) -> PairedTile:
    cond, c_max = _read_channels(cond_path)
    target, t_max = _read_channels(target_path)
    if target.shape[0] == 1:
        raise ValueError(f"grayscale target {target_path}: optical tiles need 3 channels")
    if target.shape[0] != 3:
        raise ValueError(f"target {target_path} has {target.shape[0]} channels")
    if cond.shape[0] == 3:
        cond = np.tensordot(LUMA, cond, axes=1)[None]
    if tile_size is not None:
        cond, target = _resize(cond, tile_size), _resize(target, tile_size)
    if cond.shape[-2:] != target.shape[-2:]:
        raise ShapeMismatchError(f"{cond_path} and {target_path} differ in size: {cond.shape[-2:]} vs {target.shape[-2:]}")
    return PairedTile(
        cond=torch.from_numpy(normalize(cond, c_max)).float(),
        target=torch.from_numpy(normalize(target, t_max)).float(),
        id=tile_id or Path(target_path).stem,
        meta={"cond_path": str(cond_path), "target_path": str(target_path)},
    )


def dihedral(x: torch.Tensor, k: int) -> torch.Tensor:
    """Element ``k`` of the dihedral group of the square: ``k % 4`` quarter turns, then a horizontal flip if ``k >= 4``."""
    rot, flip = k % 4, k // 4
    if rot % 2 and x.shape[-1] != x.shape[-2]:
        raise ValueError("quarter-turn rotation needs a square tile")
    if rot:
        x = torch.rot90(x, rot, dims=(-2, -1))
    if flip:
        x = torch.flip(x, dims=(-1,))
    return x


def draw_dihedral(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 8))


def augment(pair: PairedTile, rng: np.random.Generator) -> PairedTile:
    """Apply one uniformly drawn rotation/flip to condition and target alike."""
    k = draw_dihedral(rng)
    return PairedTile(dihedral(pair.cond, k), dihedral(pair.target, k), pair.id, {**pair.meta, "dihedral": k})


def concat_condition(image: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    """Stack ``[image channels, cond channels]`` along the channel axis."""
    if image.shape[-2:] != cond.shape[-2:] or image.shape[:-3] != cond.shape[:-3]:
        raise ShapeMismatchError(f"image {tuple(image.shape)} vs cond {tuple(cond.shape)}")
    return torch.cat([image, cond], dim=-3)


def load_manifest(manifest: DatasetManifest) -> tuple[torch.Tensor, torch.Tensor, list[str]]:
    """Load every pair into ``(targets, conds, ids)`` tensors."""
    manifest.check_paths()
    if not manifest.pairs:
        raise ValueError(f"manifest for split {manifest.split!r} is empty")
    tiles = [load_pair(manifest.resolve(c), manifest.resolve(t), manifest.tile_size, i) for c, t, i in manifest.pairs]
    return torch.stack([p.target for p in tiles]), torch.stack([p.cond for p in tiles]), [p.id for p in tiles]


def sample_batch(targets, conds, batch_size: int, rng: np.random.Generator, augment_tiles: bool = True):
    """Random batch (with replacement across calls) with per-sample dihedral augmentation."""
    idx = rng.integers(0, targets.shape[0], size=batch_size)
    x0, c = targets[idx], conds[idx]
    if augment_tiles:
        ks = [draw_dihedral(rng) for _ in range(batch_size)]
        x0 = torch.stack([dihedral(x, k) for x, k in zip(x0, ks)])
        c = torch.stack([dihedral(x, k) for x, k in zip(c, ks)])
    return x0, c


# toy data ------------------------------------------------------------------

# land-cover-like colours with well separated luminance
PALETTE = np.array(
    [
        [0.10, 0.18, 0.35],  # water
        [0.16, 0.36, 0.14],  # forest
        [0.45, 0.62, 0.25],  # field
        [0.55, 0.42, 0.28],  # bare soil
        [0.62, 0.62, 0.64],  # built-up
        [0.93, 0.90, 0.80],  # bright roofs
    ]
)
SPECKLE_LOOKS = 4.0
_LOG_FLOOR, _LOG_CEIL = np.log(0.02), np.log(3.0)


def toy_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Procedural colour scene ``(3, H, W)`` in ``[0, 1]``: base colour, gradient, rectangles."""
    img = np.empty((3, size, size))
    img[:] = PALETTE[rng.integers(len(PALETTE))][:, None, None]
    for _ in range(rng.integers(2, 6)):
        h, w = rng.integers(size // 6 + 1, size // 2 + 2, size=2)
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        img[:, y : y + h, x : x + w] = PALETTE[rng.integers(len(PALETTE))][:, None, None]
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    img = img * (1.0 + rng.uniform(0.05, 0.2) * (ramp - ramp.mean()))
    img += rng.normal(0.0, 0.01, size=3)[:, None, None]
    return np.clip(img, 0.0, 1.0)


def speckle(rng: np.random.Generator, shape, looks: float = SPECKLE_LOOKS) -> np.ndarray:
    """Unit-mean multiplicative gamma noise with variance ``1/looks``."""
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def sar_like(target01: np.ndarray, rng: np.random.Generator, looks: float = SPECKLE_LOOKS) -> np.ndarray:
    """Speckled, log-compressed luminance in ``[0, 1]``."""
    lum = np.tensordot(LUMA, target01, axes=1)
    intensity = lum * speckle(rng, lum.shape, looks)
    log_i = np.log(np.maximum(intensity, np.exp(_LOG_FLOOR)))
    return np.clip((log_i - _LOG_FLOOR) / (_LOG_CEIL - _LOG_FLOOR), 0.0, 1.0)


def _to_png(arr01: np.ndarray, path: Path) -> None:
    u8 = np.floor(arr01 * 255.0 + 0.5).astype(np.uint8)
    img = Image.fromarray(u8[0] if u8.shape[0] == 1 else u8.transpose(1, 2, 0))
    img.save(path, format="PNG", optimize=False)


def make_toy_dataset(n_pairs: int, tile_size: int, seed: int, out_dir, split: str = "train") -> DatasetManifest:
    """Write ``n_pairs`` toy tiles under ``out_dir/<split>`` and a ``manifest_<split>.json``."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    out = Path(out_dir)
    try:
        (out / split / "cond").mkdir(parents=True, exist_ok=True)
        (out / split / "target").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write toy dataset to {out}: {exc}") from exc
    rng = np.random.default_rng(np.random.SeedSequence([seed, sum(map(ord, split))]))
    pairs = []
    for i in range(n_pairs):
        tid = f"{split}_{i:05d}"
        scene = toy_scene(rng, tile_size)
        cond = sar_like(scene, rng)[None]
        c_rel, t_rel = f"{split}/cond/{tid}.png", f"{split}/target/{tid}.png"
        _to_png(cond, out / c_rel)
        _to_png(scene, out / t_rel)
        pairs.append((c_rel, t_rel, tid))
    manifest = DatasetManifest(root=".", pairs=pairs, split=split, tile_size=tile_size)
    manifest.save(out / f"manifest_{split}.json")
    manifest.root = str(out.resolve())
    return manifest
