"""Matplotlib figures written straight to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .wavelet import BANDS  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def _show(ax, img, title):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        ax.imshow(img, cmap="gray", interpolation="nearest")
    else:
        ax.imshow(np.clip(img, 0.0, 1.0), interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.axis("off")


def _display(band: np.ndarray) -> np.ndarray:
    lo, hi = band.min(), band.max()
    return np.zeros_like(band) if hi - lo < 1e-12 else (band - lo) / (hi - lo)


def plot_subbands(image: np.ndarray, pyramid, path, title: str = "") -> Path:
    """Input next to each level's four sub-bands, every band min-max scaled for display."""
    levels = len(pyramid)
    fig, axes = plt.subplots(levels, 5, figsize=(10, 2.2 * levels), squeeze=False)
    for row, bands in enumerate(pyramid):
        if row == 0:
            _show(axes[row][0], image, "input")
        else:
            axes[row][0].axis("off")
        for col, name in enumerate(BANDS, start=1):
            band = bands[name].data
            if band.ndim == 3:
                band = band.mean(axis=2)
            _show(axes[row][col], _display(band), f"{name} (level {row + 1})")
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_warp(known: np.ndarray, render: np.ndarray, warped: np.ndarray, mask: np.ndarray, path) -> Path:
    """Known view, render at the novel pose, warped pseudo ground truth and its validity mask."""
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    _show(axes[0], known, "known view")
    _show(axes[1], render, "novel pose")
    _show(axes[2], warped, "warped known view")
    _show(axes[3], mask.astype(np.float64), f"valid mask ({mask.mean():.0%})")
    return _save(fig, path)


def plot_training(records: Sequence[dict], path, terms: Sequence[str] = ("total", "mse", "dw")) -> Path:
    """Loss curves on a log scale; DW iterations are plotted as points since they are sparse."""
    fig, ax = plt.subplots(figsize=(7, 4))
    it = np.array([r["iteration"] for r in records])
    for name in terms:
        vals = np.array([np.nan if r.get(name) is None else r[name] for r in records], dtype=np.float64)
        if np.all(np.isnan(vals)):
            continue
        keep = ~np.isnan(vals) & (vals > 0)
        style = "o" if keep.sum() < len(vals) / 2 else "-"
        ax.plot(it[keep], vals[keep], style, ms=2, lw=1, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_metrics(names: Sequence[str], psnr: Sequence[float], ssim: Sequence[float], path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    x = np.arange(len(names))
    axes[0].bar(x, psnr, color="tab:blue")
    axes[0].set_ylabel("PSNR (dB)")
    axes[1].bar(x, ssim, color="tab:orange")
    axes[1].set_ylabel("SSIM")
    for ax in axes:
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
        ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def plot_renders(gts: Sequence[np.ndarray], renders: Sequence[np.ndarray], names: Sequence[str], path) -> Path:
    n = len(renders)
    fig, axes = plt.subplots(2, n, figsize=(2.4 * n, 5), squeeze=False)
    for i in range(n):
        _show(axes[0][i], gts[i], f"{names[i]} truth")
        _show(axes[1][i], renders[i], f"{names[i]} render")
    return _save(fig, path)


def plot_bench(rows: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    labels = [f"{r['kernel']}\n{r['size']}" for r in rows]
    x = np.arange(len(rows))
    med = np.array([r["median_ms"] for r in rows])
    p95 = np.array([r["p95_ms"] for r in rows])
    ax.bar(x, med, color="tab:blue", label="median")
    ax.errorbar(x, med, yerr=np.vstack([np.zeros_like(med), p95 - med]), fmt="none", ecolor="k", capsize=3, label="p95")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("ms")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)
