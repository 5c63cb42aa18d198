"""Figures written next to the CLI's machine-readable output."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_theta(theta, path, vartheta=None, title: str | None = None) -> str:
    """Induced weights against rank, log-scaled when they span orders of magnitude."""
    theta = np.asarray(theta, dtype=float)
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ranks = np.arange(1, len(theta) + 1)
    ax.plot(ranks, theta, lw=1.5, label=r"induced $\theta_j$")
    if vartheta is not None:
        vt = np.asarray(vartheta, dtype=float)
        ax.plot(np.arange(1, len(vt) + 1), vt, "o", ms=3, label=r"slot weights $\vartheta_i$")
    pos = theta[theta > 0]
    if len(pos) and pos.max() / pos.min() > 1e3:
        ax.set_yscale("log")
    ax.set_xlabel("rank among negatives")
    ax.set_ylabel("weight")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _finish(fig, path)


def plot_comparison(rows, path, metric: str = "recall_ratio") -> str:
    """Grouped bars of a comparison metric per strategy and k, with the parity line at 1."""
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    ks = sorted({r["k"] for r in rows})
    width = 0.8 / max(len(strategies), 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(ks))
    for i, s in enumerate(strategies):
        vals = [next(r[metric] for r in rows if r["strategy"] == s and r["k"] == k) for k in ks]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=s)
    if metric.endswith("ratio"):
        ax.axhline(1.0, color="k", lw=0.8, ls="--")
    ax.set_xticks(x)
    ax.set_xticklabels([f"@{k}" for k in ks])
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def plot_history(history, path, k: int = 1) -> str:
    fig, ax1 = plt.subplots(figsize=(5.5, 3.5))
    steps = [h.step for h in history]
    ax1.plot(steps, [h.report.recall_at.get(k, np.nan) for h in history], "-o", ms=3, label=f"R@{k}")
    ax1.set_xlabel("step")
    ax1.set_ylabel(f"R@{k}")
    ax2 = ax1.twinx()
    ax2.plot(steps, [h.train_loss for h in history], color="tab:red", lw=1, label="train loss")
    ax2.set_ylabel("train loss")
    return _finish(fig, path)
