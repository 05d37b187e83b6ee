"""Return panels: CSV loading, regime-switching synthesis, rolling volatility and date splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

ROLES = ("asset_price", "asset_return", "context")


@dataclass(frozen=True)
class ReturnPanel:
    """Aligned daily simple returns for ``m`` assets plus ``k`` context series.

    ``warmup`` leading rows are history only: they feed lagged features but
    are not part of the evaluation range of this panel.
    """

    dates: np.ndarray
    asset_returns: np.ndarray
    asset_names: tuple[str, ...]
    context: np.ndarray
    context_names: tuple[str, ...]
    warmup: int = 0
    dropped_rows: int = 0
    regimes: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        r = np.array(self.asset_returns, dtype=np.float64)
        c = np.array(self.context, dtype=np.float64)
        if c.ndim == 1 and c.size == 0:
            c = c.reshape(len(dates), 0)
        if r.ndim != 2 or r.shape[0] != len(dates):
            raise DataError(f"asset_returns shape {r.shape} does not match {len(dates)} dates")
        if c.ndim != 2 or c.shape[0] != len(dates):
            raise DataError(f"context shape {c.shape} does not match {len(dates)} dates")
        if r.shape[1] != len(self.asset_names) or c.shape[1] != len(self.context_names):
            raise DataError("column names do not match data widths")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise DataError("dates must be strictly increasing")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(c)):
            raise DataError("panel contains missing or non-finite values")
        if np.any(np.abs(r) >= 1.0):
            raise DataError("daily return of -100% or beyond (|r| >= 1)")
        if not 0 <= self.warmup <= len(dates):
            raise DataError("warmup outside the panel")
        r.flags.writeable = False
        c.flags.writeable = False
        dates.flags.writeable = False
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "asset_returns", r)
        object.__setattr__(self, "context", c)
        object.__setattr__(self, "asset_names", tuple(self.asset_names))
        object.__setattr__(self, "context_names", tuple(self.context_names))
        if self.regimes is not None:
            reg = np.array(self.regimes, dtype=np.int64)
            reg.flags.writeable = False
            object.__setattr__(self, "regimes", reg)

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def m(self) -> int:
        return self.asset_returns.shape[1]

    @property
    def k(self) -> int:
        return self.context.shape[1]

    @property
    def eval_dates(self) -> np.ndarray:
        return self.dates[self.warmup:]

    def rows(self, start: int, stop: int, warmup: int = 0) -> "ReturnPanel":
        return ReturnPanel(
            dates=self.dates[start:stop],
            asset_returns=self.asset_returns[start:stop],
            asset_names=self.asset_names,
            context=self.context[start:stop],
            context_names=self.context_names,
            warmup=warmup,
            dropped_rows=self.dropped_rows,
            regimes=None if self.regimes is None else self.regimes[start:stop],
        )


# ----------------------------------------------------------------------------
# CSV input
# ----------------------------------------------------------------------------

def read_keyvalue(path: str | Path) -> dict[str, str]:
    """Parse a ``key = value`` text file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_schema(path: str | Path) -> dict[str, str]:
    schema = read_keyvalue(path)
    for col, role in schema.items():
        if role not in ROLES:
            raise DataError(f"schema column {col!r}: unknown role {role!r} (expected one of {ROLES})")
    return schema


def _parse_date(text: str, where: str) -> np.datetime64:
    try:
        if len(text) != 10:
            raise ValueError
        return np.datetime64(text, "D")
    except ValueError:
        raise DataError(f"{where}: unparsable date {text!r}") from None


def _read_table(path: Path, wanted: set[str]) -> tuple[list[np.datetime64], dict[str, list[float]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if "date" not in header:
            raise DataError(f"{path}: no 'date' column")
        cols = {name: header.index(name) for name in header if name in wanted}
        di = header.index("date")
        dates: list[np.datetime64] = []
        values: dict[str, list[float]] = {name: [] for name in cols}
        for lineno, row in enumerate(reader, 2):
            if not row or all(not cell.strip() for cell in row):
                continue
            dates.append(_parse_date(row[di].strip(), f"{path}:{lineno}"))
            for name, ci in cols.items():
                cell = row[ci].strip() if ci < len(row) else ""
                if cell == "" or cell.lower() in ("na", "nan"):
                    values[name].append(math.nan)
                    continue
                try:
                    values[name].append(float(cell))
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric cell {cell!r} in column {name!r}") from None
    return dates, values


def load_csv(paths: str | Path | Sequence[str | Path], schema: dict[str, str] | str | Path) -> ReturnPanel:
    """Load one or more CSV files and align them on their common dates.

    Rows with any missing cell are dropped and counted in ``dropped_rows``.
    Price columns are converted to simple returns on the aligned rows, which
    consumes the first row.
    """
    if not isinstance(schema, dict):
        schema = load_schema(schema)
    if isinstance(paths, (str, Path)):
        paths = [paths]
    assets = [c for c, role in schema.items() if role != "context"]
    contexts = [c for c, role in schema.items() if role == "context"]
    if len(assets) < 2:
        raise DataError(f"need at least 2 asset columns, schema names {len(assets)}")

    series: dict[str, dict[np.datetime64, float]] = {}
    for p in paths:
        dates, values = _read_table(Path(p), set(schema))
        if len(set(dates)) != len(dates):
            raise DataError(f"{p}: duplicate dates")
        for name, vals in values.items():
            if name in series:
                raise DataError(f"column {name!r} appears in more than one file")
            series[name] = dict(zip(dates, vals))
    missing = [c for c in schema if c not in series]
    if missing:
        raise DataError(f"schema columns not found in input: {missing}")

    # outer union of dates; a date absent from any column counts as a missing cell
    all_dates = sorted(set().union(*(s.keys() for s in series.values())))
    order = assets + contexts
    table = np.array([[series[c].get(d, math.nan) for c in order] for d in all_dates], dtype=np.float64)
    table = table.reshape(len(all_dates), len(order))
    ok = np.all(np.isfinite(table), axis=1)
    dropped = int(np.count_nonzero(~ok))
    if not np.any(ok):
        raise DataError("empty intersection of dates across columns")
    dates = np.array(all_dates, dtype="datetime64[D]")[ok]
    table = table[ok]

    a = table[:, :len(assets)]
    is_price = np.array([schema[c] == "asset_price" for c in assets])
    if np.any(is_price):
        if np.any(a[:, is_price] <= 0):
            raise DataError("price levels must be positive")
        rets = np.empty((len(dates) - 1, len(assets)))
        rets[:, is_price] = a[1:, is_price] / a[:-1, is_price] - 1.0
        rets[:, ~is_price] = a[1:, ~is_price]
        dates, a, ctx = dates[1:], rets, table[1:, len(assets):]
    else:
        ctx = table[:, len(assets):]
    if len(dates) == 0:
        raise DataError("empty intersection of dates across columns")
    return ReturnPanel(dates, a, tuple(assets), ctx, tuple(contexts), dropped_rows=dropped)


def write_panel_csv(panel: ReturnPanel, path: str | Path, header_lines: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *panel.asset_names, *panel.context_names])
        for i, d in enumerate(panel.dates):
            w.writerow([str(d), *(repr(float(x)) for x in panel.asset_returns[i]),
                        *(repr(float(x)) for x in panel.context[i])])


# ----------------------------------------------------------------------------
# synthetic regime-switching data
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class Regime:
    mean: tuple[float, ...]
    vol: tuple[float, ...]
    corr: tuple[tuple[float, ...], ...]
    duration: float


@dataclass(frozen=True)
class SynthSpec:
    m_risky: int
    T: int
    regimes: tuple[Regime, ...]
    context_predictivity: float = 1.0
    seed: int = 0
    start: str = "2010-01-01"
    corr_window: int = 20

    def validate(self) -> None:
        if self.m_risky < 1 or self.T < 2 or not self.regimes:
            raise DataError("synth spec needs m_risky >= 1, T >= 2 and at least one regime")
        if not 0.0 <= self.context_predictivity <= 1.0:
            raise DataError("context_predictivity must lie in [0, 1]")
        for i, r in enumerate(self.regimes):
            corr = np.asarray(r.corr, dtype=np.float64)
            if len(r.mean) != self.m_risky or len(r.vol) != self.m_risky or corr.shape != (self.m_risky,) * 2:
                raise DataError(f"regime {i}: parameter sizes do not match m_risky={self.m_risky}")
            if any(v < 0 for v in r.vol):
                raise DataError(f"regime {i}: negative volatility")
            if r.duration < 1:
                raise DataError(f"regime {i}: expected duration must be >= 1 day")
            if not np.allclose(corr, corr.T) or not np.allclose(np.diag(corr), 1.0):
                raise DataError(f"regime {i}: correlation must be symmetric with unit diagonal")
            if np.linalg.eigvalsh(corr).min() < -1e-10:
                raise DataError(f"regime {i}: correlation matrix is not positive semi-definite")


def uniform_corr(m: int, rho: float) -> tuple[tuple[float, ...], ...]:
    c = np.full((m, m), float(rho))
    np.fill_diagonal(c, 1.0)
    return tuple(tuple(float(x) for x in row) for row in c)


def _psd_factor(corr: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(corr)
    return v * np.sqrt(np.clip(w, 0.0, None))


def _rolling_corr(x: np.ndarray, y: np.ndarray, window: int) -> np.ndarray:
    out = np.zeros(len(x))
    for t in range(len(x)):
        lo = max(0, t - window + 1)
        a, b = x[lo:t + 1], y[lo:t + 1]
        if len(a) < 3:
            continue
        sa, sb = a.std(), b.std()
        if sa > 1e-12 and sb > 1e-12:
            out[t] = float(np.mean((a - a.mean()) * (b - b.mean())) / (sa * sb))
    return out


def synthesize(spec: SynthSpec) -> ReturnPanel:
    """Markov-switching Gaussian returns plus a zero-return cash asset.

    Context columns: ``regime_flag`` (true regime index, replaced by a
    different regime with probability ``1 - context_predictivity``),
    ``corr_proxy`` (trailing correlation of the first two risky assets) and
    ``noise`` (standard normal).
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_reg = len(spec.regimes)
    T, m = spec.T, spec.m_risky

    regimes = np.empty(T, dtype=np.int64)
    state = 0
    u_switch = rng.random(T)
    u_dest = rng.random(T)
    for t in range(T):
        if t > 0 and n_reg > 1 and u_switch[t] < 1.0 / spec.regimes[state].duration:
            others = [j for j in range(n_reg) if j != state]
            state = others[int(u_dest[t] * len(others))]
        regimes[t] = state

    z = rng.standard_normal((T, m))
    rets = np.empty((T, m))
    for j, reg in enumerate(spec.regimes):
        rows = regimes == j
        L = _psd_factor(np.asarray(reg.corr, dtype=np.float64))
        rets[rows] = np.asarray(reg.mean) + (z[rows] @ L.T) * np.asarray(reg.vol)
    if np.any(np.abs(rets) >= 1.0):
        raise DataError("synthetic returns reached |r| >= 1; reduce volatility")

    flag = regimes.astype(np.float64)
    corrupt = rng.random(T) >= spec.context_predictivity
    u_flag = rng.random(T)
    if n_reg > 1:
        for t in np.flatnonzero(corrupt):
            others = [j for j in range(n_reg) if j != regimes[t]]
            flag[t] = others[int(u_flag[t] * len(others))]
    corr = _rolling_corr(rets[:, 0], rets[:, 1], spec.corr_window) if m >= 2 else np.zeros(T)
    noise = rng.standard_normal(T)

    dates = np.busday_offset(np.datetime64(spec.start, "D"), np.arange(T), roll="forward")
    cash = np.zeros((T, 1))
    return ReturnPanel(
        dates=dates,
        asset_returns=np.hstack([rets, cash]),
        asset_names=tuple(f"asset_{i + 1}" for i in range(m)) + ("cash",),
        context=np.column_stack([flag, corr, noise]),
        context_names=("regime_flag", "corr_proxy", "noise"),
        regimes=regimes,
    )


# ----------------------------------------------------------------------------
# rolling statistics and splits
# ----------------------------------------------------------------------------

def rolling_std(panel: ReturnPanel, window: int) -> np.ndarray:
    """Trailing sample std (n-1) over ``window`` days including day t; NaN for the first window-1 rows."""
    if window < 2:
        raise DataError("rolling std window must be >= 2")
    if window > panel.T:
        raise DataError(f"rolling std window {window} exceeds panel length {panel.T}")
    r = panel.asset_returns
    out = np.full(r.shape, np.nan)
    win = np.lib.stride_tricks.sliding_window_view(r, window, axis=0)  # [T-w+1, m, w]
    out[window - 1:] = win.std(axis=-1, ddof=1)
    return out


@dataclass(frozen=True)
class SplitSpec:
    train: tuple[str, str] = ("2010-01-01", "2015-12-31")
    validation: tuple[str, str] = ("2016-01-01", "2017-12-31")
    test: tuple[str, str] = ("2018-01-01", "2020-03-31")

    def bounds(self) -> list[tuple[np.datetime64, np.datetime64]]:
        out = []
        for name in ("train", "validation", "test"):
            lo, hi = (np.datetime64(str(x), "D") for x in getattr(self, name))
            if hi < lo:
                raise DataError(f"{name} range ends before it starts")
            out.append((lo, hi))
        for (_, a_hi), (b_lo, _), name in zip(out, out[1:], ("validation", "test")):
            if b_lo <= a_hi:
                raise DataError(f"{name} range must start after the previous range ends")
        return out


# calendar slack when deciding whether a range is covered (weekends, holidays)
_COVER_SLACK = np.timedelta64(7, "D")


def split(panel: ReturnPanel, spec: SplitSpec, warmup: int = 0) -> tuple[ReturnPanel, ReturnPanel, ReturnPanel]:
    """Cut train/validation/test panels by date.

    Validation and test panels carry ``warmup`` extra leading rows of history
    (typically max lag + std window) so their first evaluation day has a full
    state; those rows are marked by ``ReturnPanel.warmup``.
    """
    out = []
    for (lo, hi), name in zip(spec.bounds(), ("train", "validation", "test")):
        if panel.dates[0] > lo + _COVER_SLACK or panel.dates[-1] < hi - _COVER_SLACK:
            raise DataError(f"{name} range {lo}..{hi} not covered by panel {panel.dates[0]}..{panel.dates[-1]}")
        i0 = int(np.searchsorted(panel.dates, lo, side="left"))
        i1 = int(np.searchsorted(panel.dates, hi, side="right"))
        if i1 <= i0:
            raise DataError(f"{name} range {lo}..{hi} contains no panel dates")
        if name == "train":
            out.append(panel.rows(i0, i1))
            continue
        if i0 < warmup:
            raise DataError(f"{name} range needs {warmup} warm-up rows, only {i0} available")
        out.append(panel.rows(i0 - warmup, i1, warmup=warmup))
    return tuple(out)
