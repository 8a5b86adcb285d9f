"""Optional SVG figures; needs matplotlib (``pip install rainbalance[plots]``)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "rainbalance"  # stable element ids across runs
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def loss_trace(trace: list[dict], path) -> Path:
    plt = _pyplot()
    steps = [r["step"] for r in trace]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for key in ("total", "mse", "cluster", "kl"):
        ax.plot(steps, [r[key] for r in trace], label=key, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return Path(path)


def forecast_vs_truth(y_true: np.ndarray, y_pred: np.ndarray, path, lead: int = 0,
                      limit: int = 500) -> Path:
    """First ``limit`` test windows at one forecast lead, physical units."""
    plt = _pyplot()
    n = min(limit, len(y_true))
    fig, ax = plt.subplots(figsize=(9, 3.5))
    ax.plot(np.arange(n), y_true[:n, lead], label="observed", lw=1)
    ax.plot(np.arange(n), y_pred[:n, lead], label="forecast", lw=1)
    ax.set_xlabel("test window")
    ax.set_ylabel("precipitation (mm)")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    plt.close(fig)
    return Path(path)
