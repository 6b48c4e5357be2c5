"""Figures for CLI reports (Agg backend, PNG output)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=90, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss(steps, losses, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, losses, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    return _save(fig, path)


def plot_metric_bars(labels, values, metric: str, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar([str(x) for x in labels], values, color="#4477aa")
    ax.set_ylabel(metric)
    return _save(fig, path)


def plot_curve(xs, ys, xlabel: str, ylabel: str, path, marker: str = "o") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(xs, ys, marker=marker)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def plot_bench(rows, path) -> Path:
    ds = [r.d for r in rows]
    fig, ax = plt.subplots(1, 2, figsize=(8, 3))
    ax[0].bar([str(d) for d in ds], [r.median_s * 1e3 for r in rows], color="#aa7744")
    ax[0].set_xlabel("downscale d")
    ax[0].set_ylabel("median attention time (ms)")
    ax[1].bar([str(d) for d in ds], [r.n_total for r in rows], color="#447744")
    ax[1].set_xlabel("downscale d")
    ax[1].set_ylabel("tokens")
    return _save(fig, path)


def plot_frames(video: np.ndarray, path, canvas: np.ndarray | None = None) -> Path:
    """First, middle and last frame; the canvas row is upsampled to the video size."""
    T = video.shape[0]
    idx = sorted({0, T // 2, T - 1})
    rows = 2 if canvas is not None else 1
    fig, axes = plt.subplots(rows, len(idx), figsize=(2 * len(idx), 2 * rows), squeeze=False)
    for j, t in enumerate(idx):
        axes[0, j].imshow(np.clip(video[t], 0, 1), interpolation="nearest")
        axes[0, j].set_title(f"t={t}")
        if canvas is not None:
            axes[1, j].imshow(np.clip(canvas[t], 0, 1), interpolation="nearest")
    for a in axes.ravel():
        a.axis("off")
    return _save(fig, path)


def plot_audio(audio: np.ndarray, path, control: np.ndarray | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.sqrt(np.mean(np.square(audio), axis=1)), label="generated")
    if control is not None:
        ax.plot(np.sqrt(np.mean(np.square(control), axis=1)), label="control", ls="--")
    ax.set_xlabel("audio frame")
    ax.set_ylabel("RMS envelope")
    ax.legend()
    return _save(fig, path)
