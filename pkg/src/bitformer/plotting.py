"""Figures for the report paths of the CLI (always rendered to files)."""
from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_alphas(rows, path, title="learned activation scales"):
    """Bar chart of alpha per site, log scale; ``rows`` are dicts with layer, site, kind, alpha."""
    fig, ax = plt.subplots(figsize=(max(6.0, 0.22 * len(rows)), 3.6))
    labels = [f"L{r['layer']}.{r['site']}" for r in rows]
    colors = ["tab:orange" if r["kind"] == "unsigned" else "tab:blue" for r in rows]
    ax.bar(range(len(rows)), [r["alpha"] for r in rows], color=colors)
    ax.set_yscale("log")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_ylabel("alpha")
    ax.set_title(title)
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in ("tab:blue", "tab:orange")]
    ax.legend(handles, ["signed", "unsigned"], fontsize=8)
    return _finish(fig, path)


def plot_paths(rows, path, title="dev accuracy along distillation paths"):
    """One curve per path from (path, stage, spec, dev_acc) rows."""
    curves = OrderedDict()
    for p, stage, spec, acc in rows:
        curves.setdefault(p, []).append((int(stage), spec, float(acc)))
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for p, pts in curves.items():
        pts.sort()
        ax.plot([s for s, _, _ in pts], [100 * a for _, _, a in pts], marker="o", label=p)
    ax.set_xlabel("stage")
    ax.set_ylabel("dev accuracy (%)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_sweep(rows, path, title="hyperparameter sweep"):
    """Dev accuracy per grid point; ``rows`` are dicts with lr, batch_size, dev_acc."""
    fig, ax = plt.subplots(figsize=(5.6, 3.6))
    for bs in sorted({r["batch_size"] for r in rows}):
        pts = sorted((r["lr"], r["dev_acc"]) for r in rows if r["batch_size"] == bs)
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o", label=f"batch {bs}")
    ax.set_xscale("log")
    ax.set_xlabel("learning rate")
    ax.set_ylabel("dev accuracy (%)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    return _finish(fig, path)
