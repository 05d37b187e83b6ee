"""Per-day agent state: lagged return/volatility channels, lagged context, previous weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .market_data import ReturnPanel, rolling_std

SIMPLEX_TOL = 1e-9
DEFAULT_LAGS = (0, 1, 2, 3, 4, 20, 60)


@dataclass(frozen=True)
class LagSpec:
    lags: tuple[int, ...] = DEFAULT_LAGS

    def __post_init__(self):
        lags = tuple(sorted(int(x) for x in self.lags))
        if not lags:
            raise DataError("lag spec needs at least one entry")
        if lags[0] < 0 or len(set(lags)) != len(lags):
            raise DataError(f"lags must be distinct non-negative day offsets, got {self.lags}")
        object.__setattr__(self, "lags", lags)

    def __len__(self) -> int:
        return len(self.lags)

    @property
    def max(self) -> int:
        return self.lags[-1]


@dataclass(frozen=True)
class Features:
    """How states are cut from a panel."""

    asset_lags: LagSpec = LagSpec()
    context_lags: LagSpec = LagSpec()
    std_window: int = 20

    @property
    def first_day(self) -> int:
        """Earliest day index with a complete state."""
        return max(self.asset_lags.max, self.context_lags.max) + self.std_window - 1

    @property
    def warmup(self) -> int:
        """History rows needed before an evaluation range (its first return is earned from a state one day earlier)."""
        return self.first_day + 1


@dataclass(frozen=True)
class StateTensor:
    asset_block: np.ndarray    # [2, m, L1]: lagged returns, lagged rolling stds
    context_block: np.ndarray  # [k + 3, L2]: raw context rows then max return, max vol, min vol
    prev_weights: np.ndarray   # [m]
    date: np.datetime64 | None = None


def _risky_columns(panel: ReturnPanel) -> np.ndarray:
    """Columns used for cross-asset aggregates: every asset except an identically-zero cash column."""
    names = np.array([n.lower() for n in panel.asset_names])
    cash = (names == "cash") & np.all(panel.asset_returns == 0.0, axis=0)
    cols = np.flatnonzero(~cash)
    return cols if cols.size else np.arange(panel.m)


def derived_context(panel: ReturnPanel, t: int, lag: int, std_window: int, stds: np.ndarray | None = None) -> np.ndarray:
    """(max risky return, max risky vol, min risky vol) on day ``t - lag``."""
    d = t - lag
    if d < std_window - 1 or t >= panel.T:
        raise DataError(f"insufficient history for derived context at t={t}, lag={lag}")
    if stds is None:
        stds = rolling_std(panel, std_window)
    cols = _risky_columns(panel)
    r, s = panel.asset_returns[d, cols], stds[d, cols]
    return np.array([r.max(), s.max(), s.min()])


def state_arrays(panel: ReturnPanel, stds: np.ndarray, ts: Sequence[int] | np.ndarray,
                 features: Features) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised state construction for many days.

    Returns ``asset [N, 2, m, L1]`` and ``context [N, k + 3, L2]``. Only rows
    ``<= t`` of the panel are read for day ``t``.
    """
    ts = np.asarray(ts, dtype=np.int64).reshape(-1)
    if ts.size and (ts.min() < features.first_day or ts.max() >= panel.T):
        raise DataError(
            f"insufficient history: day index must lie in [{features.first_day}, {panel.T - 1}]")
    l1 = np.asarray(features.asset_lags.lags)
    l2 = np.asarray(features.context_lags.lags)
    rows1 = ts[:, None] - l1[None, :]                                   # [N, L1]
    rets = panel.asset_returns[rows1]                                   # [N, L1, m]
    vols = stds[rows1]
    asset = np.stack([rets, vols], axis=1).transpose(0, 1, 3, 2)        # [N, 2, m, L1]

    rows2 = ts[:, None] - l2[None, :]                                   # [N, L2]
    raw = panel.context[rows2].transpose(0, 2, 1)                       # [N, k, L2]
    cols = _risky_columns(panel)
    rr = panel.asset_returns[:, cols]
    ss = stds[:, cols]
    derived = np.stack([rr.max(axis=1)[rows2], ss.max(axis=1)[rows2], ss.min(axis=1)[rows2]], axis=1)
    context = np.concatenate([raw, derived], axis=1)
    return asset, context


def check_simplex(w: np.ndarray, tol: float = SIMPLEX_TOL) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < -tol) or np.any(np.abs(w.sum(axis=-1) - 1.0) > tol):
        raise DataError(f"weights off the simplex beyond {tol:g}: {w}")
    return w


def build_state(panel: ReturnPanel, stds: np.ndarray, t: int, asset_lags: LagSpec, context_lags: LagSpec,
                prev_w: np.ndarray, std_window: int = 20) -> StateTensor:
    features = Features(asset_lags, context_lags, std_window)
    prev_w = check_simplex(prev_w)
    if prev_w.shape != (panel.m,):
        raise DataError(f"prev_w has shape {prev_w.shape}, expected ({panel.m},)")
    asset, context = state_arrays(panel, stds, [t], features)
    return StateTensor(asset[0], context[0], prev_w.copy(), panel.dates[t])


@dataclass(frozen=True)
class Normalizer:
    """Affine standardisation fitted on training states and frozen afterwards.

    Asset statistics are per channel (pooled over assets and lags) so relative
    levels across assets survive; context statistics are per row.
    """

    asset_center: np.ndarray   # [2]
    asset_scale: np.ndarray    # [2]
    context_center: np.ndarray  # [R]
    context_scale: np.ndarray   # [R]

    @classmethod
    def fit(cls, asset: np.ndarray, context: np.ndarray) -> "Normalizer":
        if asset.shape[0] == 0:
            raise DataError("cannot fit a normalizer on an empty set of states")
        a_mu = asset.mean(axis=(0, 2, 3))
        a_sd = asset.std(axis=(0, 2, 3))
        c_mu = context.mean(axis=(0, 2))
        c_sd = context.std(axis=(0, 2))
        a_flat, c_flat = a_sd < 1e-12, c_sd < 1e-12
        return cls(
            np.where(a_flat, 0.0, a_mu), np.where(a_flat, 1.0, a_sd),
            np.where(c_flat, 0.0, c_mu), np.where(c_flat, 1.0, c_sd),
        )

    def apply_arrays(self, asset: np.ndarray, context: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = (asset - self.asset_center[:, None, None]) / self.asset_scale[:, None, None]
        c = (context - self.context_center[:, None]) / self.context_scale[:, None]
        return a, c

    def apply(self, state: StateTensor) -> StateTensor:
        a, c = self.apply_arrays(state.asset_block[None], state.context_block[None])
        return StateTensor(a[0], c[0], state.prev_weights, state.date)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("asset_center", "asset_scale", "context_center", "context_scale")}


def fit_normalizer(states: Sequence[StateTensor]) -> Normalizer:
    if not states:
        raise DataError("cannot fit a normalizer on an empty set of states")
    return Normalizer.fit(np.stack([s.asset_block for s in states]), np.stack([s.context_block for s in states]))


def apply(normalizer: Normalizer, state: StateTensor) -> StateTensor:
    return normalizer.apply(state)


class StateTable:
    """Normalised states for every usable day of one panel, computed once.

    Day ``t`` is usable when ``features.first_day <= t``; ``next_returns[t]``
    holds the returns realised over ``(t, t+1]``.
    """

    def __init__(self, panel: ReturnPanel, features: Features, normalizer: Normalizer | None = None):
        self.panel = panel
        self.features = features
        self.stds = rolling_std(panel, features.std_window)
        self.first_day = features.first_day
        if self.first_day >= panel.T:
            raise DataError(f"panel of {panel.T} rows is shorter than the {features.warmup}-row warm-up")
        days = np.arange(self.first_day, panel.T)
        asset, context = state_arrays(panel, self.stds, days, features)
        self.raw_asset, self.raw_context = asset, context
        self.normalizer = normalizer
        if normalizer is not None:
            asset, context = normalizer.apply_arrays(asset, context)
        self.asset = asset
        self.context = context

    @property
    def m(self) -> int:
        return self.panel.m

    def rows(self, ts) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(ts) - self.first_day
        return self.asset[idx], self.context[idx]

    def next_returns(self, ts) -> np.ndarray:
        return self.panel.asset_returns[np.asarray(ts) + 1]

    def eval_days(self) -> np.ndarray:
        """Decision days whose next-day return falls in the panel's evaluation range."""
        start = max(self.panel.warmup - 1, self.first_day)
        return np.arange(start, self.panel.T - 1)

    def with_normalizer(self, normalizer: Normalizer) -> "StateTable":
        return StateTable(self.panel, self.features, normalizer)
