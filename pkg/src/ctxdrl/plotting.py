"""Report figures (PNG, Agg backend, no timestamps in metadata so reruns are byte-identical)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.dates as mdates  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .backtest import BacktestReport  # noqa: E402

_METADATA = {"Software": None}
_STYLE = {
    "figure.figsize": (8.0, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_METADATA)
    plt.close(fig)
    return path


def _dates(report: BacktestReport):
    return report.dates.astype("datetime64[D]").astype(object)


def _shade(ax, dates, mask: np.ndarray | None, label: str = "crisis regime") -> None:
    if mask is None or not mask.any():
        return
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
    for k, (a, b) in enumerate(zip(edges[::2], edges[1::2])):
        ax.axvspan(dates[a], dates[b - 1], color="0.85", lw=0, zorder=0, label=label if k == 0 else None)


def value_curves(reports: Sequence[BacktestReport], path: str | Path, title: str = "",
                 highlight: np.ndarray | None = None) -> Path:
    """Cumulative portfolio value of several reports over a shared date axis."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for rep in reports:
            d = _dates(rep)
            ax.plot(d, rep.value, lw=1.2, label=rep.label)
        if reports:
            _shade(ax, _dates(reports[0]), highlight)
        ax.set_ylabel("portfolio value")
        ax.xaxis.set_major_formatter(mdates.DateFormatter("%Y-%m"))
        ax.legend(fontsize=7, ncol=2)
        if title:
            ax.set_title(title)
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path)


def allocation(report: BacktestReport, path: str | Path, highlight: np.ndarray | None = None) -> Path:
    """Stacked daily weights held by one model."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        d = _dates(report)
        ax.stackplot(d, report.weights.T, labels=list(report.asset_names), lw=0)
        _shade(ax, d, highlight)
        ax.set_ylim(0, 1)
        ax.set_ylabel("weight")
        ax.set_title(f"allocation: {report.label}")
        ax.xaxis.set_major_formatter(mdates.DateFormatter("%Y-%m"))
        ax.legend(fontsize=7, loc="upper left", ncol=len(report.asset_names))
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path)


def ranking_bars(labels: Sequence[str], values: Sequence[float], path: str | Path, xlabel: str) -> Path:
    """Horizontal bar chart, one bar per model in the given order."""
    with plt.rc_context({**_STYLE, "figure.figsize": (8.0, max(3.0, 0.22 * len(labels) + 1.0))}):
        fig, ax = plt.subplots()
        y = np.arange(len(labels))
        ax.barh(y, values, color=["tab:green" if v >= 0 else "tab:red" for v in values])
        ax.set_yticks(y, labels, fontsize=6)
        ax.invert_yaxis()
        ax.axvline(0.0, color="k", lw=0.6)
        ax.set_xlabel(xlabel)
        fig.tight_layout()
        return _save(fig, path)


def training_curve(epochs: Sequence[int], train_reward: Sequence[float], val_metric: Sequence[float],
                   path: str | Path) -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, train_reward, lw=1.0, label="train reward (batch mean)")
        ax.plot(epochs, val_metric, lw=1.0, label="validation metric")
        ax.set_xlabel("epoch")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)
