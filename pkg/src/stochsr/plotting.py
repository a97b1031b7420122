"""Figure emission for training histories and rank diagnostics."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DomainError
from .metrics import RankTally

QUALITY_HISTORY_NAME = "quality_history.png"
RANK_HISTORY_NAME = "rank_history.png"
RANK_HISTOGRAM_NAME = "rank_histogram.png"
RANK_CDF_NAME = "rank_cdf.png"


def plot_quality_history(history: list[dict], out_dir: str | Path) -> Path:
    """Quality metrics against generator training sequences.

    LSD is divided by 50 and CRPS multiplied by 10 so all four curves share
    one axis scale.
    """
    if not history:
        raise DomainError("empty metric history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xs = [row["g_sequences"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(xs, [row["rmse"] for row in history], "b-", label="RMSE")
    ax.plot(xs, [1.0 - row["ms_ssim"] for row in history], "C1--", label="1 - MS-SSIM")
    ax.plot(xs, [row["lsd_db"] / 50.0 for row in history], "g:", label="LSD / 50")
    ax.plot(xs, [10.0 * row["crps"] for row in history], "r-.", label="CRPS x 10")
    ax.set_xlabel("generator training sequences")
    ax.set_ylabel("metric value")
    ax.legend()
    fig.tight_layout()
    path = out_dir / QUALITY_HISTORY_NAME
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rank_history(history: list[dict], out_dir: str | Path) -> Path:
    """Rank-distribution metrics against generator training sequences."""
    if not history:
        raise DomainError("empty metric history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xs = [row["g_sequences"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(xs, [row["ks"] for row in history], "b-", label="KS")
    ax.plot(xs, [row["d_kl"] for row in history], "C1--", label="KL divergence")
    ax.plot(xs, [row["outlier_fraction"] for row in history], "g-.", label="OF")
    ax.plot(
        xs,
        [abs(row["mean_rank"] - 0.5) for row in history],
        "r:",
        label="|mean rank - 1/2|",
    )
    ax.set_xlabel("generator training sequences")
    ax.set_ylabel("metric value")
    ax.legend()
    fig.tight_layout()
    path = out_dir / RANK_HISTORY_NAME
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_rank_histogram(tally: RankTally, out_dir: str | Path) -> np.ndarray:
    """Normalized occurrence of each rank value; returns the frequencies."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    freqs = tally.frequencies()
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(tally.support(), freqs, "b-", drawstyle="steps-mid", label="observed")
    ax.axhline(1.0 / tally.n_bins, color="g", linestyle=":", label="uniform")
    ax.set_xlabel("normalized rank")
    ax.set_ylabel("frequency")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / RANK_HISTOGRAM_NAME, dpi=120)
    plt.close(fig)
    return freqs


def plot_rank_cdf(tally: RankTally, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(tally.support(), np.cumsum(tally.frequencies()), "b-", label="observed")
    ax.plot(
        tally.support(),
        np.arange(1, tally.n_bins + 1) / tally.n_bins,
        "g:",
        label="uniform",
    )
    ax.set_xlabel("normalized rank")
    ax.set_ylabel("CDF")
    ax.legend()
    fig.tight_layout()
    path = out_dir / RANK_CDF_NAME
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
