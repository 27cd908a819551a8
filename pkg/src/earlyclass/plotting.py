"""Figures written next to the CSV reports (PNG, headless Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import METRICS, EvalReport, SweepResult  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
})

LABELS = {"accuracy": "accuracy", "tstop": "mean stop", "precision": "precision",
          "recall": "recall", "f1": "$f_1$", "kappa": r"$\kappa$"}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_stop_times(report: EvalReport, days: np.ndarray, labels: np.ndarray, path,
                    class_names: Sequence[str] | None = None) -> Path:
    """Horizontal boxplots of stop day-of-year per true class."""
    repeats = report.repeats
    labels = np.tile(np.asarray(labels), repeats)
    days = np.tile(np.asarray(days), (repeats, 1))
    stop_days = days[np.arange(len(report.t_stop)), report.t_stop]
    classes = [s.label for s in report.stop_stats]
    groups = [stop_days[labels == k] for k in classes]
    names = [class_names[k] if class_names else s.name for k, s in zip(classes, report.stop_stats)]

    fig, ax = plt.subplots(figsize=(6, 0.35 * len(classes) + 1.2))
    ax.boxplot(groups, orientation="horizontal", whis=(0, 100), widths=0.6)
    ax.set_yticks(range(1, len(classes) + 1), names)
    ax.invert_yaxis()
    ax.set_xlim(0, 365)
    ax.set_xlabel("stop day of year")
    return _save(fig, path)


def plot_sweep(result: SweepResult, path) -> Path:
    alphas = result.alphas()
    rows = [result.row(a) for a in alphas]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for m, style in zip(METRICS, ("o-", "s--", "^:", "v:", "d:", "x:")):
        mean = np.array([r[f"{m}_mean"] for r in rows])
        std = np.array([r[f"{m}_std"] for r in rows])
        ax.errorbar(alphas, mean, yerr=std, fmt=style, capsize=2, label=LABELS[m], lw=1)
    ax.set_xlabel(r"$\alpha$")
    ax.set_ylim(0, 1.05)
    ax.legend(ncol=3, fontsize=7, loc="lower right")
    return _save(fig, path)


def plot_trace(days: np.ndarray, class_scores: np.ndarray, stop_probs: np.ndarray,
               stop_dist: np.ndarray, t_stop: int, path,
               class_names: Sequence[str] | None = None, true_label: int | None = None) -> Path:
    """Class scores and stopping probability of one sequence over the season."""
    M = class_scores.shape[1]
    names = class_names or [str(k) for k in range(M)]
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 4), sharex=True, height_ratios=(2, 1))
    for k in range(M):
        lw = 2.0 if k == true_label else 0.8
        top.plot(days, class_scores[:, k], lw=lw, label=names[k])
    top.set_ylabel("class score")
    top.set_ylim(0, 1)
    top.legend(fontsize=6, ncol=3, loc="upper left")
    bottom.plot(days, stop_probs, "k-", lw=1, label="$p_t$")
    bottom.bar(days, stop_dist, width=2.0, color="tab:orange", alpha=0.6, label="$P(t)$")
    for ax in (top, bottom):
        ax.axvline(days[t_stop], color="tab:red", lw=1, ls="--")
    bottom.set_ylim(0, 1.05)
    bottom.set_xlabel("day of year")
    bottom.legend(fontsize=7, loc="upper left")
    return _save(fig, path)
