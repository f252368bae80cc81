"""Report figures, written as PNG files next to the CSV/JSON output."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .workload import OptimizationReport  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def time_scatter(report: OptimizationReport, path) -> Path:
    """Initial versus optimized simulated time per query, log-log, with y = x."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t0 = [r.t_init for r in report.records]
        t1 = [r.t_opt for r in report.records]
        colors = ["tab:blue" if r.valid else "tab:red" for r in report.records]
        ax.scatter(t0, t1, s=14, c=colors, alpha=0.8)
        positive = [t for t in t0 + t1 if t > 0]
        if positive:
            lo, hi = min(positive), max(positive)
            ax.plot([lo, hi], [lo, hi], color="grey", lw=0.8, ls="--")
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel("initial plan time")
        ax.set_ylabel("optimized plan time")
        ax.set_title(f"{report.method}: per-query times")
        return _save(fig, Path(path))


def improvement_hist(report: OptimizationReport, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist([100 * r.relative_improvement for r in report.records], bins=20, color="tab:green")
        ax.axvline(100 * report.summary.poi, color="black", lw=1, label=f"mean {100 * report.summary.poi:.1f}%")
        ax.set_xlabel("improvement (%)")
        ax.set_ylabel("queries")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def method_bars(reports: Sequence[OptimizationReport], path) -> Path:
    """Average initial and optimized time for each method side by side."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [r.method for r in reports]
        xs = range(len(reports))
        ax.bar([x - 0.2 for x in xs], [r.summary.avg_time_init for r in reports], 0.4,
               label="initial", color="lightgrey")
        ax.bar([x + 0.2 for x in xs], [r.summary.avg_time_opt for r in reports], 0.4,
               label="optimized", color="tab:blue")
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("average time per query")
        ax.legend(frameon=False)
        return _save(fig, Path(path))


def cost_trace(costs_by_run: Sequence[Sequence[float]], path, title: str = "") -> Path:
    """Cost of each accepted plan over the iterations of one or more runs."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for costs in costs_by_run:
            if costs:
                ax.plot(range(len(costs)), costs, marker=".", lw=0.8, alpha=0.6)
        ax.set_xlabel("accepted plan")
        ax.set_ylabel("estimated cost")
        if title:
            ax.set_title(title)
        return _save(fig, Path(path))
