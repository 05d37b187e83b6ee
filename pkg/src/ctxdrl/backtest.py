"""Portfolio accounting, performance metrics and report files.

Weights decided at the close of day ``t`` earn the returns of day ``t+1``;
the daily portfolio return is ``w_t . r_{t+1} - c * sum|w_t - w_{t-1}|``.
Reports index everything by the day the return is realised.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DataError
from .market_data import ReturnPanel

TRADING_DAYS = 252
AGENT_SIMPLEX_TOL = 1e-6


def default_w0(panel: ReturnPanel) -> np.ndarray:
    """All-cash starting holding: the ``cash`` column when present, otherwise nothing invested."""
    w0 = np.zeros(panel.m)
    names = [n.lower() for n in panel.asset_names]
    if "cash" in names:
        w0[names.index("cash")] = 1.0
    return w0


def annualize(total_return: float, n_days: int) -> float:
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    if total_return <= -1.0:
        raise ValueError("total return must exceed -100%")
    return (1.0 + total_return) ** (TRADING_DAYS / n_days) - 1.0


def sharpe_raw(daily_returns) -> float | None:
    """Annualised mean/std of daily returns; None when the std is below 1e-12."""
    r = np.asarray(daily_returns, dtype=np.float64)
    if r.size < 2:
        raise ValueError("sharpe needs at least two observations")
    sd = r.std(ddof=1)
    if sd < 1e-12:
        return None
    return float(r.mean() / sd * math.sqrt(TRADING_DAYS))


def sharpe(daily_returns) -> float | None:
    """Reported Sharpe ratio: not available (None) for zero dispersion or a non-positive annual return."""
    raw = sharpe_raw(daily_returns)
    r = np.asarray(daily_returns, dtype=np.float64)
    total = float(np.prod(1.0 + r) - 1.0)
    if raw is None or total <= -1.0 or annualize(total, r.size) <= 0.0:
        return None
    return raw


def max_drawdown(value: np.ndarray) -> float:
    peak = np.maximum.accumulate(np.concatenate([[1.0], value]))
    return float(np.max(1.0 - np.concatenate([[1.0], value]) / peak))


def portfolio_returns(weights: np.ndarray, next_returns: np.ndarray, w0: np.ndarray,
                      commission: float) -> tuple[np.ndarray, np.ndarray]:
    """Daily net returns and L1 turnover for a weight path ``[N, m]``."""
    prev = np.vstack([w0[None, :], weights[:-1]])
    turnover = np.abs(weights - prev).sum(axis=1)
    rho = (weights * next_returns).sum(axis=1) - commission * turnover
    return rho, turnover


@dataclass
class BacktestReport:
    label: str
    dates: np.ndarray
    asset_names: tuple[str, ...]
    weights: np.ndarray     # [N, m], held over each date
    returns: np.ndarray     # [N]
    value: np.ndarray       # [N], V_0 = 1 before the first date
    turnover: np.ndarray    # [N]
    commission: float
    config: dict = field(default_factory=dict)
    input_hash: str = ""

    @property
    def n_days(self) -> int:
        return len(self.returns)

    @property
    def total_return(self) -> float:
        return float(self.value[-1] - 1.0)

    def summary(self) -> dict:
        n = self.n_days
        total = self.total_return
        sd = float(self.returns.std(ddof=1)) if n >= 2 else float("nan")
        return {
            "total_return": total,
            "annual_return": annualize(total, n),
            "annual_std": sd * math.sqrt(TRADING_DAYS),
            "sharpe": sharpe(self.returns) if n >= 2 else None,
            "sharpe_raw": sharpe_raw(self.returns) if n >= 2 else None,
            "max_drawdown": max_drawdown(self.value),
            "mean_turnover": float(self.turnover.mean()),
            "n_days": n,
            "start": str(self.dates[0]),
            "end": str(self.dates[-1]),
        }

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "summary": self.summary(),
            "commission": self.commission,
            "asset_names": list(self.asset_names),
            "mean_weights": [float(x) for x in self.weights.mean(axis=0)],
            "config": self.config,
            "input_hash": self.input_hash,
        }

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        if csv_path is not None:
            self.write_csv(csv_path)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# label: {self.label}\n")
            fh.write(f"# input_hash: {self.input_hash}\n")
            fh.write(f"# config: {json.dumps(self.config, sort_keys=True)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "value", "return", "turnover", *(f"w_{n}" for n in self.asset_names)])
            for i in range(self.n_days):
                w.writerow([str(self.dates[i]), repr(float(self.value[i])), repr(float(self.returns[i])),
                            repr(float(self.turnover[i])), *(repr(float(x)) for x in self.weights[i])])


def evaluate_weights(panel: ReturnPanel, weights: np.ndarray, commission: float,
                     eval_range: tuple[int, int] | None = None, w0: np.ndarray | None = None,
                     label: str = "", config: dict | None = None, input_hash: str = "") -> BacktestReport:
    """Account a weight path whose row ``i`` is held over evaluation row ``eval_range[0] + i``."""
    e0, e1 = eval_range if eval_range is not None else (max(panel.warmup, 1), panel.T)
    if not 1 <= e0 < e1 <= panel.T:
        raise DataError(f"evaluation range {(e0, e1)} invalid for a panel of {panel.T} rows")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (e1 - e0, panel.m):
        raise DataError(f"weight path shape {weights.shape} != {(e1 - e0, panel.m)}")
    if not np.all(np.isfinite(weights)) or np.any(weights < -AGENT_SIMPLEX_TOL) \
            or np.any(np.abs(weights.sum(axis=1) - 1.0) > AGENT_SIMPLEX_TOL):
        raise DataError("agent produced weights off the long-only simplex")
    if commission < 0:
        raise DataError("commission must be >= 0")
    w0 = default_w0(panel) if w0 is None else np.asarray(w0, dtype=np.float64)
    rho, turnover = portfolio_returns(weights, panel.asset_returns[e0:e1], w0, commission)
    value = np.cumprod(1.0 + rho)
    if np.any(value <= 0):
        raise DataError("portfolio value reached zero")
    return BacktestReport(label, panel.dates[e0:e1], panel.asset_names, weights, rho, value, turnover,
                          commission, dict(config or {}), input_hash)


Agent = Callable[[ReturnPanel, int, np.ndarray], np.ndarray]


def run(agent, panel: ReturnPanel, commission: float, eval_range: tuple[int, int] | None = None,
        w0: np.ndarray | None = None, label: str = "", config: dict | None = None,
        input_hash: str = "") -> BacktestReport:
    """Backtest an agent over the evaluation range of ``panel``.

    ``agent`` either exposes ``weight_path(panel, days, w0) -> [N, m]`` or is a
    callable ``agent(panel, t, prev_w) -> [m]`` invoked once per decision day.
    """
    e0, e1 = eval_range if eval_range is not None else (max(panel.warmup, 1), panel.T)
    days = np.arange(e0 - 1, e1 - 1)
    w0 = default_w0(panel) if w0 is None else np.asarray(w0, dtype=np.float64)
    if hasattr(agent, "weight_path"):
        weights = agent.weight_path(panel, days, w0)
    else:
        weights = np.empty((len(days), panel.m))
        prev = w0
        for i, t in enumerate(days):
            weights[i] = prev = np.asarray(agent(panel, int(t), prev), dtype=np.float64)
    return evaluate_weights(panel, weights, commission, (e0, e1), w0, label, config, input_hash)


# ----------------------------------------------------------------------------
# comparison
# ----------------------------------------------------------------------------

def trimmed_mean(values: Sequence[float], n_drop: int = 2) -> float:
    """Mean after removing the ``n_drop`` largest-magnitude values (all kept when too few)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan")
    if v.size > n_drop:
        order = np.argsort(-np.abs(v), kind="stable")
        v = v[order[n_drop:]]
    return float(v.mean())


@dataclass
class Comparison:
    rows: list[dict]
    deltas: list[dict]
    mean_return_delta: float
    mean_sharpe_delta: float


def _pair_key(rep: dict) -> tuple | None:
    axes = rep.get("config", {}).get("axes")
    if axes and "use_context" in axes:
        rest = sorted((k, v) for k, v in axes.items() if k not in ("use_context", "index"))
        return tuple(rest), bool(axes["use_context"])
    label = rep["label"]
    for tag, flag in (("_ctx-yes", True), ("_ctx-no", False)):
        if tag in label:
            return (label.replace(tag, "_ctx-*"),), flag
    return None


def compare(reports: Sequence[BacktestReport | dict]) -> Comparison:
    """Per-model metrics plus with/without-context differences.

    A not-available Sharpe counts as 0 in the differences; the mean
    differences drop the two largest-magnitude values per criterion.
    """
    reps = [r.to_json() if isinstance(r, BacktestReport) else r for r in reports]
    if not reps:
        raise DataError("nothing to compare")
    span = {(r["summary"]["start"], r["summary"]["end"], r["summary"]["n_days"]) for r in reps}
    if len(span) > 1:
        raise DataError(f"reports cover different evaluation ranges: {sorted(span)}")
    rows = []
    for r in reps:
        s = r["summary"]
        rows.append({"label": r["label"], "annual_return": s["annual_return"], "annual_std": s["annual_std"],
                     "sharpe": s["sharpe"], "sharpe_raw": s["sharpe_raw"], "total_return": s["total_return"]})

    with_ctx, without = {}, {}
    for r in reps:
        key = _pair_key(r)
        if key is not None:
            (with_ctx if key[1] else without)[key[0]] = r
    deltas = []
    for key in sorted(set(with_ctx) & set(without), key=lambda k: with_ctx[k]["label"]):
        a, b = with_ctx[key]["summary"], without[key]["summary"]
        deltas.append({
            "with_context": with_ctx[key]["label"],
            "without_context": without[key]["label"],
            "annual_return_delta": a["annual_return"] - b["annual_return"],
            "sharpe_delta": (a["sharpe"] or 0.0) - (b["sharpe"] or 0.0),
        })
    return Comparison(
        rows=rows,
        deltas=deltas,
        mean_return_delta=trimmed_mean([d["annual_return_delta"] for d in deltas]),
        mean_sharpe_delta=trimmed_mean([d["sharpe_delta"] for d in deltas]),
    )
