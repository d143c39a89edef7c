"""Report figures written next to the JSON outputs of the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_KEYS = ("L_D_opt", "L_D_sar", "L_GAN_T", "L_L1_T", "L_T")

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or y.size < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_losses(records: Sequence[Dict], path, smooth: int = 25) -> Path:
    """Discriminator losses on the left, translator terms on the right."""
    path = Path(path)
    steps = np.array([r["step"] for r in records])
    with plt.rc_context(STYLE):
        fig, (ax_d, ax_t) = plt.subplots(1, 2, figsize=(9, 3.2))
        for ax, keys in ((ax_d, LOSS_KEYS[:2]), (ax_t, LOSS_KEYS[2:])):
            for key in keys:
                y = np.array([r[key] for r in records], dtype=float)
                ys = _smooth(y, smooth)
                ax.plot(steps[len(steps) - len(ys):], ys, label=key, lw=1.2)
            ax.set_xlabel("step")
            ax.legend(frameon=False)
        ax_d.set_title("discriminators")
        ax_t.set_title("translators")
        ax_t.set_yscale("log")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def _show(ax, img: np.ndarray, title: Optional[str] = None) -> None:
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 1:
        ax.imshow(img[:, :, 0], cmap="gray", vmin=0, vmax=255)
    else:
        ax.imshow(img)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=8)


def plot_comparison(
    fakes: Sequence[np.ndarray],
    reals: Sequence[np.ndarray],
    per_pair: List[Dict],
    path,
    max_rows: int = 4,
) -> Path:
    """Translated/true image rows plus per-pair L1 and SSIM histograms."""
    path = Path(path)
    rows = min(max_rows, len(fakes))
    with plt.rc_context(STYLE):
        fig = plt.figure(figsize=(7.5, 1.9 * rows + 2.2))
        grid = fig.add_gridspec(rows + 1, 4, height_ratios=[1] * rows + [1.1])
        for i in range(rows):
            pm = per_pair[i]
            _show(fig.add_subplot(grid[i, 0]), fakes[i], "translated" if i == 0 else None)
            _show(fig.add_subplot(grid[i, 1]), reals[i], "true" if i == 0 else None)
            diff = np.abs(np.asarray(fakes[i], float) - np.asarray(reals[i], float)).mean(axis=2)
            ax = fig.add_subplot(grid[i, 2])
            ax.imshow(diff, cmap="magma", vmin=0, vmax=128)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.set_title(f"|diff|  L1 {pm['l1']:.1f}  SSIM {pm['ssim']:.3f}", fontsize=7)
        for j, key in enumerate(("l1", "ssim")):
            ax = fig.add_subplot(grid[rows, 2 * j : 2 * j + 2])
            ax.hist([p[key] for p in per_pair], bins=20, color="0.35")
            ax.set_xlabel(f"per-pair {key.upper()}")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
