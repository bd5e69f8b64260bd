"""Report figures written to files (Agg backend, no display needed)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_adjacency(adjacency: np.ndarray, path: str | Path, class_names: Sequence[str] | None = None,
                   title: str = "adjacency") -> Path:
    """Heatmap grid of ``(blocks, heads, C, C)`` superimposed adjacencies."""
    adj = np.asarray(adjacency, dtype=float)
    if adj.ndim == 2:
        adj = adj[None, None]
    blocks, heads, c, _ = adj.shape
    fig, axes = plt.subplots(blocks, heads, figsize=(2.6 * heads, 2.4 * blocks), squeeze=False)
    vmax = float(adj.max()) if adj.size else 1.0
    for b in range(blocks):
        for h in range(heads):
            ax = axes[b, h]
            im = ax.imshow(adj[b, h], cmap="viridis", vmin=0.0, vmax=vmax)
            ax.set_title(f"block {b} head {h}", fontsize=8)
            ticks = range(c)
            labels = class_names if class_names is not None else [str(i) for i in ticks]
            ax.set_xticks(ticks, labels, rotation=90, fontsize=6)
            ax.set_yticks(ticks, labels, fontsize=6)
    fig.colorbar(im, ax=axes, shrink=0.6)
    fig.suptitle(title)
    return _save(fig, path)


def plot_cam(frames: np.ndarray, maps: np.ndarray, path: str | Path, title: str = "", max_frames: int = 8) -> Path:
    """Overlay ``(T, H', W')`` maps on ``(T, H, W, 3)`` frames, upsampled by cell repetition."""
    frames = np.asarray(frames)
    maps = np.asarray(maps)
    t_len = frames.shape[0]
    picks = np.unique(np.linspace(0, t_len - 1, min(max_frames, t_len)).round().astype(int))
    fig, axes = plt.subplots(1, len(picks), figsize=(2.0 * len(picks), 2.2), squeeze=False)
    h, w = frames.shape[1:3]
    for ax, t in zip(axes[0], picks):
        ax.imshow(frames[t])
        ax.imshow(maps[t], cmap="jet", alpha=0.45, extent=(0, w, h, 0), vmin=0.0, vmax=1.0, interpolation="nearest")
        ax.set_title(f"t={t}", fontsize=8)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_loss_curves(history: Sequence[dict], path: str | Path) -> Path:
    """Per-component batch losses and, when present, validation totals per epoch."""
    epochs = [float(r["epoch"]) for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "verbs", "nouns", "objects"):
        col = f"batch_loss_{key}"
        if history and col in history[0]:
            ax.plot(epochs, [float(r[col]) for r in history], label=f"train {key}")
    if history and "val_loss_total" in history[0]:
        vals = [float(r["val_loss_total"]) if r["val_loss_total"] not in ("", None) else math.nan for r in history]
        ax.plot(epochs, vals, "k--", label="val total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_class_deltas(deltas: Sequence[dict], path: str | Path, kind: str = "noun",
                      class_names: Sequence[str] | None = None) -> Path:
    """Bar chart of per-class top-1 accuracy change against the baseline."""
    rows = [r for r in deltas if r["kind"] == kind]
    classes = sorted({int(r["class"]) for r in rows})
    vals = []
    for c in classes:
        ds = [float(r["delta"]) for r in rows if int(r["class"]) == c and r["delta"] not in ("", None)]
        ds = [d for d in ds if not math.isnan(d)]
        vals.append(float(np.mean(ds)) if ds else 0.0)
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(classes)), 3))
    ax.bar(range(len(classes)), vals, color=["tab:green" if v >= 0 else "tab:red" for v in vals])
    labels = [class_names[c] if class_names is not None else str(c) for c in classes]
    ax.set_xticks(range(len(classes)), labels, rotation=60, fontsize=7)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_ylabel("top-1 change (points)")
    ax.set_title(f"per-class {kind} accuracy vs baseline")
    return _save(fig, path)


def plot_ablation(grid: Sequence[dict], path: str | Path, metrics: Sequence[str] = ("verb_top1", "noun_top1", "action_top1")) -> Path:
    """Grouped bars of the ablation grid."""
    settings = [r["setting"] for r in grid]
    x = np.arange(len(settings))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(1.8 * len(settings) + 2, 3.5))
    for i, m in enumerate(metrics):
        ax.bar(x + i * width, [float(r[m]) for r in grid], width, label=m)
    ax.set_xticks(x + width * (len(metrics) - 1) / 2, settings, rotation=15, fontsize=8)
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=7)
    return _save(fig, path)
