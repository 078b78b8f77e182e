"""Static SVG figures for reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_SVG_META = {"Date": None, "Creator": "cvplab"}

plt.rcParams.update({
    "figure.figsize": (5.0, 3.4),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "svg.hashsalt": "cvplab",
})


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_sigma_trajectory(traj, path: str | Path, title: str = "batch median sigma") -> Path:
    fig, ax = plt.subplots()
    ax.plot(traj.cycles, traj.sigma_src, label="source", color="tab:blue")
    ax.plot(traj.cycles, traj.sigma_tgt, label="target", color="tab:orange")
    if traj.adapt_start is not None:
        ax.axvline(traj.cycles[traj.adapt_start] - 0.5, color="0.4", ls="--", lw=0.8)
    ax.set_xlabel("cycle")
    ax.set_ylabel("sigma")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_correlations(report, path: str | Path) -> Path:
    names = list(report.correlations)
    vals = [report.correlations[n].r if report.correlations[n].r is not None else 0.0 for n in names]
    fig, ax = plt.subplots()
    bars = ax.bar(names, vals, color="tab:green")
    for bar, n in zip(bars, names):
        if report.correlations[n].r is None:
            bar.set_hatch("//")
            bar.set_color("0.8")
    ax.set_ylim(-1, 1)
    ax.axhline(0, color="k", lw=0.6)
    ax.set_ylabel("Pearson r with sigma")
    return _save(fig, path)


def plot_correlation_scatter(report, path: str | Path) -> Path:
    series = {k: v for k, v in report.series().items() if v is not None}
    fig, axes = plt.subplots(1, len(series), figsize=(2.2 * len(series), 2.4), sharey=True)
    for ax, (name, values) in zip(axes, series.items()):
        ax.scatter(values, report.sigma, s=3, alpha=0.4)
        ax.set_xlabel(name)
    axes[0].set_ylabel("sigma")
    return _save(fig, path)


def plot_sweep(axis: str, values: Sequence[float], accuracies: Sequence[float | None],
               path: str | Path) -> Path:
    pts = [(v, a) for v, a in zip(values, accuracies) if a is not None]
    fig, ax = plt.subplots()
    if pts:
        ax.plot([p[0] for p in pts], [100 * p[1] for p in pts], marker="o")
    if axis == "M":
        ax.set_xscale("log", base=2)
    ax.set_xlabel(axis)
    ax.set_ylabel("target accuracy (%)")
    return _save(fig, path)
