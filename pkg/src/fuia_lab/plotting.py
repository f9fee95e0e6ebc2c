"""Static figures for a finished run: PSNR summary, class scores, reconstruction grids."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import read_pnm  # noqa: E402

ATTACK_COLORS = {"fuia": "#1f77b4", "muia": "#ff7f0e", "random": "#7f7f7f"}
GRID_ROWS = ("truth", "fuia", "muia")


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def psnr_summary(summary: Sequence[dict], path) -> Path | None:
    """Bar chart of median PSNR per (method, attack)."""
    entries = [s for s in summary if s.get("median_psnr") is not None]
    if not entries:
        return None
    fig, ax = plt.subplots(figsize=(max(3.0, 1.1 * len(entries)), 3.0))
    labels = [f"{s['method']}\n{s['attack']}" for s in entries]
    values = [s["median_psnr"] for s in entries]
    colors = [ATTACK_COLORS.get(s["attack"], "#2ca02c") for s in entries]
    ax.bar(range(len(entries)), values, color=colors)
    ax.set_xticks(range(len(entries)), labels)
    ax.set_ylabel("median PSNR (dB)")
    ax.spines[["top", "right"]].set_visible(False)
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom", fontsize=8)
    return _save(fig, Path(path))


def score_bars(scores_csv, path, truth: Sequence[int] = ()) -> Path:
    """Discrimination score per class; forgotten classes drawn in red."""
    with Path(scores_csv).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = [int(r["class_id"]) for r in rows]
    vals = [float(r["S_d"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.0, 2.6))
    ax.bar(ids, vals, color=["#d62728" if i in set(truth) else "#7f7f7f" for i in ids])
    ax.set_xticks(ids)
    ax.set_xlabel("class id")
    ax.set_ylabel("$S_d$")
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, Path(path))


def _to_display(img: np.ndarray) -> np.ndarray:
    return img[0] if img.shape[0] == 1 else np.transpose(img, (1, 2, 0))


def reconstruction_grid(images_dir, path) -> Path | None:
    """One block per target client: rows truth / FUIA / MUIA, one column per image."""
    images_dir = Path(images_dir)
    clients = sorted(d for d in images_dir.iterdir() if d.is_dir()) if images_dir.exists() else []
    blocks = []
    for cdir in clients:
        rows = [(name, sorted((cdir / name).glob("*.p?m"))) for name in GRID_ROWS if (cdir / name).exists()]
        if rows:
            blocks.append((cdir.name, rows))
    if not blocks:
        return None
    n_rows = sum(len(rows) for _, rows in blocks)
    n_cols = max(len(files) for _, rows in blocks for _, files in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.1 * n_cols + 0.9, 1.1 * n_rows), squeeze=False)
    r = 0
    for client, rows in blocks:
        for name, files in rows:
            for c in range(n_cols):
                ax = axes[r, c]
                ax.set_xticks([])
                ax.set_yticks([])
                if c < len(files):
                    img = _to_display(read_pnm(files[c]))
                    ax.imshow(img, cmap="gray" if img.ndim == 2 else None, vmin=0.0, vmax=1.0)
                else:
                    ax.axis("off")
            axes[r, 0].set_ylabel(f"{client}\n{name}" if name == "truth" else name, fontsize=7)
            r += 1
    return _save(fig, Path(path))


def render_report(cfg, out: Path, summary: Sequence[dict]) -> list[Path]:
    """Write every figure that applies to the run under ``out/plots``."""
    import json

    plots = out / "plots"
    written = []
    p = psnr_summary(summary, plots / "psnr_summary.png")
    if p:
        written.append(p)
    for i in range(cfg.experiment.trials):
        attack = out / f"trial-{i:03d}" / "attack"
        if (attack / "scores.csv").exists():
            truth = json.loads((attack / "report.json").read_text())["request"]["classes"]
            written.append(score_bars(attack / "scores.csv", plots / f"scores-trial-{i:03d}.png", truth))
        g = reconstruction_grid(attack / "images", plots / f"recon-trial-{i:03d}.png")
        if g:
            written.append(g)
    return written
