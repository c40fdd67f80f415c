"""Evaluation, sample grids, latency benchmarking and file-based sampling."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from .config import TrainConfig
from .consistency import ConsistencyParams
from .data import DatasetManifest, load_manifest, normalize, _read_channels, _resize, LUMA
from .metrics import ConvEmbedder, MetricReport, score_tiles, to_unit
from .sampler import ancestral_sample, bench_latency, consistency_sample, ddim_sample, uniform_plan
from .schedule import NoiseSchedule
from .training import load_model

log = logging.getLogger(__name__)

GRID_PAD = 2
GRID_HEADER = 12


def parse_method(method: str) -> tuple[str, int | None]:
    """``"ancestral"``, ``"ddim:100"`` or ``"consistency:8"`` -> ``(name, steps)``."""
    name, _, steps = method.partition(":")
    if name not in ("ancestral", "ddim", "consistency"):
        raise ValueError(f"unknown sampling method {method!r}")
    return name, int(steps) if steps else None


def run_sampler(model, sched: NoiseSchedule, params: ConsistencyParams, cond, method: str, steps: int | None, seed: int):
    if method == "ancestral":
        return ancestral_sample(model, sched, cond, seed)
    if method == "ddim":
        return ddim_sample(model, sched, cond, steps or 100, eta=0.0, seed=seed)
    return consistency_sample(model, params, sched, cond, uniform_plan(steps or 8, sched, seed, params.t_min))


def sample_in_batches(model, sched, params, conds, method: str, steps: int | None, seed: int, batch: int = 64):
    outs = []
    for i in range(0, len(conds), batch):
        outs.append(run_sampler(model, sched, params, conds[i : i + batch], method, steps, seed + i))
    return torch.cat(outs)


def _rgb(x: torch.Tensor, channels: int = 3) -> np.ndarray:
    x = to_unit(x.detach().cpu().float())
    if x.shape[0] == 1:
        x = x.expand(channels, *x.shape[1:])
    return (x.numpy().transpose(1, 2, 0) * 255.0 + 0.5).astype(np.uint8)


def emit_grid(rows, path, labels: list[str] | None = None) -> Path:
    """Write rows of ``[-1, 1]`` tiles as one PNG.

    Size is ``cols·s + (cols+1)·2`` by ``12 + rows·s + (rows+1)·2`` pixels for
    ``s``-pixel tiles; the 12-pixel header holds the column labels.
    """
    rows = [list(r) for r in rows]
    if not rows:
        raise ValueError("no rows to draw")
    size = rows[0][0].shape[-1]
    ncols = max(len(r) for r in rows)
    if any(x.shape[-2:] != (size, size) for r in rows for x in r):
        raise ValueError("all tiles in a grid must share one size")
    w = ncols * size + (ncols + 1) * GRID_PAD
    h = GRID_HEADER + len(rows) * size + (len(rows) + 1) * GRID_PAD
    canvas = Image.new("RGB", (w, h), (255, 255, 255))
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            x = GRID_PAD + j * (size + GRID_PAD)
            y = GRID_HEADER + GRID_PAD + i * (size + GRID_PAD)
            canvas.paste(Image.fromarray(_rgb(tile)), (x, y))
    if labels:
        draw = ImageDraw.Draw(canvas)
        font = ImageFont.load_default()
        for j, text in enumerate(labels[:ncols]):
            draw.text((GRID_PAD + j * (size + GRID_PAD), 1), text, fill=(0, 0, 0), font=font)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write grid {path}: {exc}") from exc
    return path


def emit_sample_grid(model, cfg: TrainConfig, sched, manifest: DatasetManifest, path, n_rows: int = 4,
                     steps=(1, 8)) -> Path:
    targets, conds, _ = load_manifest(manifest)
    conds, targets = conds[:n_rows], targets[:n_rows]
    was_training = model.training
    model.eval()
    params = cfg.distill.params()
    outs = [consistency_sample(model, params, sched, conds, uniform_plan(n, sched, cfg.eval_seed, params.t_min)) for n in steps]
    model.train(was_training)
    rows = [[conds[i], targets[i], *[o[i] for o in outs]] for i in range(len(conds))]
    return emit_grid(rows, path, ["cond", "truth", *[f"{n} ev" for n in steps]])


def _write_tile_csv(report: MetricReport, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tile_id", "psnr_db", "ssim"])
        for i, p, s in zip(report.ids, report.psnr_db, report.ssim):
            w.writerow([i, f"{p:.6f}", f"{s:.6f}"])


def _plot_curve(n_list, reports, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(n_list, [r.psnr_mean for r in reports], "o-")
    axes[0].set_ylabel("PSNR (dB)")
    axes[1].plot(n_list, [r.ssim_mean for r in reports], "o-")
    axes[1].set_ylabel("SSIM")
    for ax in axes:
        ax.set_xscale("log", base=2)
        ax.set_xlabel("denoiser evaluations")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def evaluate(
    ckpt_path,
    manifest_path,
    n_evals_list=(1, 2, 4, 8, 16),
    out_dir=None,
    seed: int = 1234,
    method: str = "consistency",
    use_ema: bool = False,
    max_tiles: int | None = None,
) -> dict:
    """Sample every test tile and score it.

    Returns ``{label: MetricReport}`` with labels ``"consistency:N"``,
    ``"ancestral"`` or ``"ddim:N"``, and writes per-tile CSVs, ``summary.json``,
    a quality-vs-evaluations curve and a sample grid under ``out_dir``.
    """
    model, ckpt = load_model(ckpt_path, use_ema=use_ema)
    cfg = TrainConfig.from_dict(ckpt.config)
    sched, params = ckpt.schedule, cfg.distill.params()
    manifest = DatasetManifest.load(manifest_path)
    targets, conds, ids = load_manifest(manifest)
    if max_tiles:
        targets, conds, ids = targets[:max_tiles], conds[:max_tiles], ids[:max_tiles]
    embedder = ConvEmbedder(in_channels=targets.shape[1])
    name, steps = parse_method(method)
    runs = [(f"consistency:{n}", "consistency", n) for n in n_evals_list] if name == "consistency" and steps is None else [
        (method, name, steps)
    ]
    reports, outputs = {}, {}
    for label, m, n in runs:
        preds = sample_in_batches(model, sched, params, conds, m, n, seed)
        rep = score_tiles(preds, targets, ids, embedder)
        rep.extra.update({"method": m, "steps": n if n is not None else sched.T})
        reports[label] = rep
        outputs[label] = preds
        log.info("%s: PSNR %.3f dB SSIM %.4f FID-proxy %s", label, rep.psnr_mean, rep.ssim_mean, rep.fid_proxy)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for label, rep in reports.items():
            _write_tile_csv(rep, out / f"tiles_{label.replace(':', '_')}.csv")
        (out / "summary.json").write_text(json.dumps({k: r.summary() for k, r in reports.items()}, indent=2))
        if len(runs) > 1:
            _plot_curve([n for _, _, n in runs], list(reports.values()), out / "curve.png")
        k = min(4, len(conds))
        rows = [[conds[i], targets[i], *[o[i] for o in outputs.values()]] for i in range(k)]
        emit_grid(rows, out / "grid.png", ["cond", "truth", *reports.keys()])
    return reports


def bench(ckpt_path, methods=("ancestral", "ddim:100", "consistency:8", "consistency:16"), reps: int = 3,
          warmup: int = 1, out_csv=None, batch: int = 1, seed: int = 0) -> list[dict]:
    """Median latency per method and speed-up relative to ancestral sampling."""
    model, ckpt = load_model(ckpt_path)
    cfg = TrainConfig.from_dict(ckpt.config)
    return bench_model(model, ckpt.schedule, cfg.distill.params(), methods, reps, warmup, out_csv, batch, seed)


def bench_model(model, sched, params, methods, reps=3, warmup=1, out_csv=None, batch=1, seed=0) -> list[dict]:
    dcfg = model.config
    gen = torch.Generator().manual_seed(seed)
    cond = torch.rand((batch, dcfg.condition_channels, dcfg.tile_size, dcfg.tile_size), generator=gen) * 2 - 1
    rows = []
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for method in methods:
            name, steps = parse_method(method)
            n_evals = sched.T if name == "ancestral" else steps
            stats = bench_latency(lambda: run_sampler(model, sched, params, cond, name, steps, seed), reps, warmup, n_evals)
            rows.append({"method": name, "steps": n_evals, "median_ms": stats.median * 1e3,
                         "per_eval_ms": stats.per_eval * 1e3, "mean_ms": stats.mean * 1e3, "std_ms": stats.std * 1e3})
    finally:
        torch.set_num_threads(prev)
    base = next((r["median_ms"] for r in rows if r["method"] == "ancestral"), None)
    for r in rows:
        r["speedup_vs_ancestral"] = base / r["median_ms"] if base else None
    if out_csv is not None:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["method", "steps", "median_ms", "speedup_vs_ancestral"])
            for r in rows:
                sp = "" if r["speedup_vs_ancestral"] is None else f"{r['speedup_vs_ancestral']:.2f}"
                w.writerow([r["method"], r["steps"], f"{r['median_ms']:.3f}", sp])
    return rows


def load_condition(path, tile_size: int) -> torch.Tensor:
    arr, vmax = _read_channels(path)
    if arr.shape[0] == 3:
        arr = np.tensordot(LUMA, arr, axes=1)[None]
    return torch.from_numpy(normalize(_resize(arr, tile_size), vmax)).float()


def sample_files(ckpt_path, input_path, out_dir, steps: int = 8, seed: int = 42, use_ema: bool = False) -> list[Path]:
    """Translate one condition PNG or a directory of them; outputs keep the input stem."""
    model, ckpt = load_model(ckpt_path, use_ema=use_ema)
    cfg = TrainConfig.from_dict(ckpt.config)
    params = cfg.distill.params()
    src = Path(input_path)
    files = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no PNG inputs under {src}")
    conds = torch.stack([load_condition(p, model.config.tile_size) for p in files])
    plan = uniform_plan(steps, ckpt.schedule, seed, params.t_min)
    out = consistency_sample(model, params, ckpt.schedule, conds, plan)
    dst = Path(out_dir)
    dst.mkdir(parents=True, exist_ok=True)
    written = []
    for p, img in zip(files, out):
        target = dst / f"{p.stem}.png"
        Image.fromarray(_rgb(img)).save(target, format="PNG", optimize=False)
        written.append(target)
    return written
