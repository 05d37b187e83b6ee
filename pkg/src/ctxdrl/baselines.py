"""Comparison allocators: static/dynamic minimum-variance, naive winner, fixed portfolios.

The mean-variance solver is projected gradient descent on the long-only,
fully-invested set intersected with the target-return half-space. The
projection itself is an exact one-dimensional multiplier search around the
Euclidean simplex projection.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import DataError
from .market_data import ReturnPanel

log = logging.getLogger(__name__)

RIDGE = 1e-8


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based)."""
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, y.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1.0)
    return np.maximum(y - tau, 0.0)


def project_feasible(y: np.ndarray, mu: np.ndarray, target: float | None) -> np.ndarray:
    """Projection onto the simplex intersected with ``mu . w >= target``.

    ``mu . P(y + lam * mu)`` is non-decreasing in ``lam``, so the multiplier is
    found by bisection.
    """
    w = project_simplex(y)
    if target is None or mu @ w >= target - 1e-15:
        return w
    lo, hi = 0.0, 1.0
    while mu @ project_simplex(y + hi * mu) < target:
        hi *= 2.0
        if hi > 1e12:
            raise DataError("target return is not attainable")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mu @ project_simplex(y + mid * mu) < target:
            lo = mid
        else:
            hi = mid
    w = project_simplex(y + hi * mu)
    # polish: on the identified support the two active constraints fix (lam, tau) exactly
    s = w > 0
    a = np.array([[mu[s].sum(), -s.sum()], [mu[s] @ mu[s], -mu[s].sum()]])
    b = np.array([1.0 - y[s].sum(), target - mu[s] @ y[s]])
    if abs(np.linalg.det(a)) > 1e-14 * max(1.0, np.abs(a).max() ** 2):
        lam, tau = np.linalg.solve(a, b)
        exact = np.where(s, y + lam * mu - tau, 0.0)
        if lam >= 0 and np.all(exact >= -1e-15):
            return np.maximum(exact, 0.0)
    return w


@dataclass(frozen=True)
class MarkovitzProblem:
    mu: np.ndarray
    cov: np.ndarray
    target: str = "min_variance"   # or "max_sharpe"
    target_return: float | None = None


@dataclass(frozen=True)
class MarkovitzSolution:
    weights: np.ndarray
    variance: float
    target_return: float | None
    clamped: bool
    iterations: int


def _repair(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov).min() < 0:
        cov = cov + RIDGE * np.eye(len(cov))
    return cov


def _lexicographic_tiebreak(w: np.ndarray, cov: np.ndarray, mu: np.ndarray, target: float | None,
                            tol: float) -> np.ndarray:
    """Among minimisers (``w + N z`` with ``N`` spanning the null space of cov) pick the lexicographically smallest."""
    evals, evecs = np.linalg.eigh(cov)
    null = evecs[:, evals <= tol * max(1.0, evals.max())]
    if null.shape[1] == 0:
        return w
    m, q = null.shape
    a_ub = [-null]
    b_ub = [w]
    if target is not None:
        a_ub.append(-(mu @ null)[None, :])
        b_ub.append([mu @ w - target])
    a_eq = [null.sum(axis=0)[None, :]]
    b_eq = [0.0]
    best = w.copy()
    for i in range(m):
        res = linprog(null[i], A_ub=np.vstack(a_ub), b_ub=np.concatenate(b_ub), A_eq=np.vstack(a_eq),
                      b_eq=b_eq, bounds=[(None, None)] * q, method="highs")
        if res.status != 0:
            break
        lowest = w[i] + null[i] @ res.x
        a_ub.append(null[i][None, :])
        b_ub.append([lowest - w[i] + 1e-12])
        best = w + null @ res.x
    best = np.maximum(best, 0.0)
    return best / best.sum()


def _min_variance(mu: np.ndarray, cov: np.ndarray, target: float | None, tol: float,
                  max_iter: int) -> tuple[np.ndarray, int]:
    m = len(mu)
    lip = 2.0 * max(np.linalg.eigvalsh(cov).max(), 1e-300)
    w = project_feasible(np.full(m, 1.0 / m), mu, target)
    for k in range(max_iter):
        grad = 2.0 * cov @ w
        step = (1.0 + 1.0 / (k + 2.0)) / lip   # decreasing, bounded below by 1/L
        w_new = project_feasible(w - step * grad, mu, target)
        # projected-gradient (gradient-mapping) norm at the fixed 1/L scale
        pg = np.linalg.norm(w - project_feasible(w - grad / lip, mu, target)) * lip
        w = w_new
        if pg < tol:
            return w, k + 1
    log.warning("min-variance solver hit max_iter=%d (pg=%.3g)", max_iter, pg)
    return w, max_iter


def solve_markovitz(p: MarkovitzProblem, tol: float = 1e-10, max_iter: int = 200_000,
                    n_sweep: int = 50) -> MarkovitzSolution:
    """Long-only fully-invested minimum variance at a target return, or the max-Sharpe point of a target sweep."""
    mu = np.asarray(p.mu, dtype=np.float64)
    cov = _repair(np.asarray(p.cov, dtype=np.float64))
    if cov.shape != (len(mu), len(mu)):
        raise DataError(f"covariance shape {cov.shape} does not match {len(mu)} means")
    evals = np.linalg.eigvalsh(cov)
    if evals.min() < -1e-10 * max(1.0, evals.max()):
        raise DataError("covariance matrix is not positive semi-definite")
    # the stopping rule is absolute, so solve on a unit-scale copy (same argmin)
    unit = cov / evals.max() if evals.max() > 0 else cov

    if p.target == "max_sharpe":
        best = None
        w_mv, _ = _min_variance(mu, unit, None, tol, max_iter)
        for r in np.linspace(mu @ w_mv, mu.max(), n_sweep):
            sol = solve_markovitz(MarkovitzProblem(mu, cov, "min_variance", float(r)), tol, max_iter)
            ratio = (mu @ sol.weights) / np.sqrt(max(sol.variance, 1e-300))
            if best is None or ratio > best[0] + 1e-12:
                best = (ratio, sol)
        return best[1]
    if p.target != "min_variance":
        raise DataError(f"unknown Markovitz target {p.target!r}")

    target, clamped = p.target_return, False
    if target is not None and target > mu.max():
        log.warning("target return %.6g above max mean %.6g; clamped", target, mu.max())
        target, clamped = float(mu.max()), True
    w, iters = _min_variance(mu, unit, target, tol, max_iter)
    w = _lexicographic_tiebreak(w, unit, mu, target, tol)
    w = project_feasible(w, mu, target)
    return MarkovitzSolution(w, float(w @ cov @ w), target, clamped, iters)


# ----------------------------------------------------------------------------
# allocators (all expose weight_path(panel, days, w0) for the backtester)
# ----------------------------------------------------------------------------

def _moments(rets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = rets.mean(axis=0)
    cov = np.cov(rets, rowvar=False, ddof=1) if len(rets) > 1 else np.zeros((rets.shape[1],) * 2)
    return mu, np.atleast_2d(cov)


def static_markovitz_weights(train: ReturnPanel, target_return: float | None = None) -> np.ndarray:
    """Minimum variance on the training moments; default target is the average of the asset means."""
    mu, cov = _moments(train.asset_returns)
    r = float(mu.mean()) if target_return is None else target_return
    return solve_markovitz(MarkovitzProblem(mu, cov, "min_variance", r)).weights


class FixedAllocator:
    def __init__(self, weights, label: str = "fixed"):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.label = label

    def weight_path(self, panel: ReturnPanel, days, w0) -> np.ndarray:
        return np.tile(self.weights, (len(days), 1))


def single_asset(m: int, i: int, label: str | None = None) -> FixedAllocator:
    w = np.zeros(m)
    w[i] = 1.0
    return FixedAllocator(w, label or f"portfolio_{i + 1}")


def naive_winner(train: ReturnPanel) -> FixedAllocator:
    """All-in on the asset with the best compounded training return (lowest index on ties)."""
    if train.T == 0:
        raise DataError("empty training panel")
    growth = np.prod(1.0 + train.asset_returns, axis=0)
    return single_asset(train.m, int(np.argmax(growth)), "naive_winner")


class DynamicMarkovitz:
    """Minimum-variance weights re-solved every ``rebalance_every`` decision days on a trailing window."""

    label = "dynamic_markovitz"

    def __init__(self, rebalance_every: int = 63, estimation_window: int = 252, target_return: float | None = None):
        if rebalance_every < 1 or estimation_window < 2:
            raise DataError("rebalance_every must be >= 1 and estimation_window >= 2")
        self.rebalance_every = rebalance_every
        self.estimation_window = estimation_window
        self.target_return = target_return
        self.n_solves = 0

    def weights_at(self, panel: ReturnPanel, t: int) -> np.ndarray:
        lo = t - self.estimation_window + 1
        if lo < 0:
            raise DataError(f"dynamic Markovitz needs {self.estimation_window} days of history at day {t}")
        mu, cov = _moments(panel.asset_returns[lo:t + 1])
        r = float(mu.mean()) if self.target_return is None else self.target_return
        self.n_solves += 1
        return solve_markovitz(MarkovitzProblem(mu, cov, "min_variance", r)).weights

    def weight_path(self, panel: ReturnPanel, days, w0) -> np.ndarray:
        days = np.asarray(days)
        out = np.empty((len(days), panel.m))
        current = None
        for i, t in enumerate(days):
            if i % self.rebalance_every == 0:
                current = self.weights_at(panel, int(t))
            out[i] = current
        return out
