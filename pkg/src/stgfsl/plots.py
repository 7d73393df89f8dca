"""Figure and table emission for the report path.

All figures go to files (PNG); the Agg backend is forced so reports work
in headless environments.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


def save_heatmap(matrix: np.ndarray, path, title: str = "") -> Path:
    """Grayscale heatmap of a matrix; dark is small, light is large."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(matrix, cmap="gray", aspect="equal")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_matrix_csv(matrix: np.ndarray, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for row in np.asarray(matrix):
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
    return path


def save_loss_curves(log_frame: pd.DataFrame, path) -> Path:
    """Per-episode mean loss curves from a training log table."""
    path = Path(path)
    by_episode = log_frame.groupby("episode")[["query_loss", "pred_loss", "recon_loss"]].mean()
    fig, ax = plt.subplots(figsize=(6, 4))
    for column in by_episode.columns:
        ax.plot(by_episode.index, by_episode[column], label=column.replace("_", " "))
    ax.set_xlabel("episode")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
