"""Report figures written next to the delimited tables.

Everything renders through the Agg backend straight to files; nothing here
opens a window.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PathLike = Union[str, Path]

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
    "svg.hashsalt": "emt",
}


def _size(scale: float = 1.0, ratio: float = 0.62):
    width = 5.5 * scale
    return width, width * ratio


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def chunk_psnr_figure(path: PathLike, chunk_ids: Sequence[int], psnr_db: Sequence[float],
                      overall: float, title: str = "Per-chunk PSNR") -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        ax.bar([str(c) for c in chunk_ids], psnr_db, color="#4c72b0", width=0.7)
        ax.axhline(overall, color="#c44e52", lw=1, ls="--", label=f"overall {overall:.2f} dB")
        lo = min(psnr_db) if len(psnr_db) else overall
        hi = max(psnr_db) if len(psnr_db) else overall
        pad = max(0.5, 0.1 * (hi - lo))
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_xlabel("chunk")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def adapt_figure(path: PathLike, chunk_ids: Sequence[int], before: Sequence[float],
                 after: Sequence[float]) -> Path:
    """Train-patch PSNR of the reference vs the adapted model for each chunk."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        x = np.arange(len(chunk_ids))
        ax.plot(x, before, "o-", color="#8c8c8c", label="reference model", ms=4)
        ax.plot(x, after, "o-", color="#4c72b0", label="adapted model", ms=4)
        ax.set_xticks(x, [str(c) for c in chunk_ids])
        ax.set_xlabel("chunk")
        ax.set_ylabel("train-patch PSNR (dB)")
        ax.legend(frameon=False)
        return _save(fig, path)


def meta_loss_figure(path: PathLike, iterations: Sequence[int], losses: Sequence[float]) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=_size())
        ax.plot(iterations, losses, color="#4c72b0", lw=1)
        ax.set_xlabel("outer iteration")
        ax.set_ylabel("meta loss (L1)")
        return _save(fig, path)


def psnr_map_figure(path: PathLike, values: np.ndarray, selected=(), title: str = "") -> Path:
    """Heat map of a patch PSNR grid with the selected cells outlined."""
    with plt.rc_context(RC):
        rows, cols = values.shape
        fig, ax = plt.subplots(figsize=(0.5 * cols + 1.5, 0.5 * rows + 0.8))
        im = ax.imshow(values, cmap="magma", interpolation="nearest")
        for r, c in selected:
            ax.add_patch(plt.Rectangle((c - 0.5, r - 0.5), 1, 1, fill=False, ec="#00e5ff", lw=1.5))
        ax.set_xticks([])
        ax.set_yticks([])
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, label="PSNR (dB)")
        return _save(fig, path)
