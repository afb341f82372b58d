"""Report figures: rank-frequency log-log plot and the sample bubble chart."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .corpus import PowerLawFit, ZipfSeries  # noqa: E402
from .verdict import Hyperplane  # noqa: E402

BUBBLE_SIZES = {"C1": 20, "C2": 60, "C3": 140, "C4": 260}
COLORS = {"benign": "tab:blue", "malicious": "tab:red"}
_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _finish(fig, ax, path):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    # fixed margins; tight_layout costs more than the rest of the figure
    fig.subplots_adjust(left=0.15, right=0.97, bottom=0.14, top=0.92)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def zipf_figure(path, series: ZipfSeries, fit: PowerLawFit | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ranks = np.arange(1, len(series) + 1)
    ax.loglog(ranks, series.frequencies, ".", ms=3, color="k", label="instructions")
    if fit is not None:
        ax.loglog(ranks, np.exp(fit.intercept) * ranks ** fit.exponent, "-", color="tab:orange",
                  label=f"fit a={fit.exponent:.3f}, $R^2$={fit.r_squared:.3f}")
    ax.set_xlabel("rank")
    ax.set_ylabel("frequency")
    ax.legend(frameon=False, fontsize=8)
    _finish(fig, ax, path)


def bubble_figure(path, records: list[dict], h: Hyperplane | None = None, title: str | None = None) -> None:
    """Malicious % against function count, bubble size by size class."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for truth in ("benign", "malicious"):
        rows = [r for r in records if r["truth"] == truth and r["n_functions"]]
        if not rows:
            continue
        ax.scatter([r["malicious_pct"] for r in rows], [r["n_functions"] for r in rows],
                   s=[BUBBLE_SIZES.get(r["size_class"], 20) for r in rows],
                   c=COLORS[truth], alpha=0.55, edgecolors="none", label=truth)
    ax.set_yscale("log")
    if h is not None:
        w, b = h.raw_space()
        ys = np.logspace(0, 3.5, 50)
        if abs(w[0]) > 1e-12:
            xs = -(b + w[1] * np.log10(ys)) / w[0]
            ax.plot(xs, ys, "k--", lw=1, label="SVM boundary")
    ax.set_xlim(-5, 105)
    ax.set_xlabel("malicious functions (%)")
    ax.set_ylabel("functions per sample")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(frameon=False, fontsize=8, loc="upper left")
    _finish(fig, ax, path)
