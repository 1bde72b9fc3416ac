"""Renders the delimited artifacts (loss log, results table, attention
maps) to PNG files.  The CSVs stay the source of truth; these plots are a
convenience layer over them and never feed back into any computation.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

from .data import read_attention_csv  # noqa: E402
from .errors import DataError  # noqa: E402

LOSS_COLUMNS = ("l_ce", "l_sc", "l_cc", "l_pc", "l_total")


def _read_csv(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DataError(f"csv file not found: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def render_loss_curves(loss_csv_path, out_png) -> Path:
    rows = _read_csv(loss_csv_path)
    if not rows:
        raise DataError(f"{loss_csv_path} holds no loss rows")
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for col in LOSS_COLUMNS:
        series = [float(r[col]) for r in rows]
        style = {"linewidth": 2.0} if col == "l_total" else {"alpha": 0.75}
        ax.plot(steps, series, label=col, **style)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", ncol=2, fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def render_ablation_chart(results_csv_path, out_png) -> Path:
    rows = _read_csv(results_csv_path)
    if not rows:
        raise DataError(f"{results_csv_path} holds no result rows")
    flags = [r["flags"] for r in rows]
    means = [float(r["mean_acc"]) for r in rows]
    cis = [float(r["ci95"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    x = np.arange(len(rows))
    ax.bar(x, means, yerr=cis, capsize=4, color="#4878a8")
    ax.set_xticks(x)
    ax.set_xticklabels(flags, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("accuracy (%)")
    lo = max(0.0, min(m - c for m, c in zip(means, cis)) - 5.0)
    ax.set_ylim(lo, min(100.0, max(means) + 5.0))
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)


def render_attention_grid(attention_dir, out_png, max_maps: int = 8) -> Path:
    attention_dir = Path(attention_dir)
    index = attention_dir / "attention_index.txt"
    if not index.exists():
        raise DataError(f"no attention index at {index}")
    entries = []
    for line in index.read_text().splitlines():
        fields = dict(tok.partition("=")[::2] for tok in line.split())
        if "map" in fields:
            entries.append(fields)
    if not entries:
        raise DataError(f"{index} lists no maps")
    entries = entries[:max_maps]
    cols = min(4, len(entries))
    rows = (len(entries) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.4 * cols, 2.6 * rows),
                             squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, entry in zip(axes.ravel(), entries):
        grid = read_attention_csv(attention_dir / entry["map"])
        ax.imshow(grid, cmap="viridis")
        ax.set_title(f"img {entry.get('image', '?')} ({entry.get('branch', '?')})",
                     fontsize=8)
        ax.axis("on")
        ax.set_xticks(())
        ax.set_yticks(())
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return Path(out_png)
