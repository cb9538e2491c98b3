"""Figure rendering for CLI reports (file output only, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["STYLE", "plot_throughput", "plot_mixing", "plot_trajectory", "plot_fit"]

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_throughput(series, path, marks=None, ylabel="throughput (jobs/s)"):
    """Throughput against batch size.

    ``series`` maps a label to ``(k, theta)`` arrays; ``marks`` maps a label to
    a batch size drawn as a vertical line.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (k, theta) in series.items():
            ax.plot(k, theta, marker=".", ms=3, lw=1, label=label)
        for label, k in (marks or {}).items():
            ax.axvline(k, ls="--", lw=0.8, color="grey")
            ax.annotate(label, (k, 0.02), xycoords=("data", "axes fraction"), fontsize=7, rotation=90)
        ax.set_xlabel("batch size k")
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)


def plot_mixing(t, tv, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.semilogy(np.asarray(t) * 1e3, np.maximum(tv, 1e-16), lw=1)
        ax.set_xlabel("time (ms)")
        ax.set_ylabel("total variation to stationarity")
        return _save(fig, path)


def plot_trajectory(t, w, path, labels=None):
    """Mean-field occupancy fractions over time; ``w`` has shape ``(T, ...)``."""
    w = np.asarray(w).reshape(len(t), -1)
    labels = labels or [f"w{i + 1}" for i in range(w.shape[1])]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i in range(w.shape[1]):
            ax.plot(t, w[:, i], lw=1, label=labels[i])
        ax.set_xlabel("time (s)")
        ax.set_ylabel("fraction of clients")
        ax.legend()
        return _save(fig, path)


def plot_fit(ks, means, models, path):
    """Measured mean service times with every fitted law overlaid."""
    ks = np.asarray(ks, dtype=float)
    grid = np.linspace(ks.min(), ks.max(), 200)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ks, means, "o", ms=4, label="measured")
        for label, model in models.items():
            ax.plot(grid, model.formula(grid), lw=1, label=label)
        ax.set_xlabel("batch size k")
        ax.set_ylabel("service time (s)")
        ax.legend()
        return _save(fig, path)
