"""Matplotlib renderings for the report path (heatmaps, ablation bars, loss curves)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_heatmap(S, path, title: str = "audio-visual frame similarity") -> Path:
    S = np.asarray(S, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(S, cmap="gray", vmin=-1.0, vmax=1.0, origin="upper", interpolation="nearest")
    ax.set_xlabel("video frame")
    ax.set_ylabel("audio frame")
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_ablation(rows: Sequence[Dict], axis: str, path) -> Path:
    """One panel per metric, one bar per axis value."""
    metrics = [("vsr_wer", "VSR WER"), ("avsr_noisy_wer", "noisy AVSR WER"), ("sync_auc", "sync AUC")]
    labels = [str(r[axis]) for r in rows]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2))
    x = np.arange(len(rows))
    for ax, (key, name) in zip(axes, metrics):
        ax.bar(x, [r[key] for r in rows], color="0.4")
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=20, fontsize=8)
        ax.set_title(name, fontsize=9)
    fig.suptitle(f"ablation over {axis}", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def plot_losses(records: Sequence[Dict], path) -> Path:
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(5, 3))
    for key in ("L_total", "L_Gen", "L_Co"):
        ax.plot(steps, [r[key] for r in records], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    return _save(fig, path)
