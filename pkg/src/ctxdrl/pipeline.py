"""End-to-end steps behind the CLI commands: prepare, train, evaluate, grid, compare.

Every file written here carries the resolved configuration and a git-style
content hash of the inputs, so a result can be reproduced from its header.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plotting
from .backtest import BacktestReport, Comparison, compare, run
from .baselines import DynamicMarkovitz, FixedAllocator, naive_winner, single_asset, static_markovitz_weights
from .config import RunConfig
from .errors import DataError
from .market_data import ReturnPanel, load_csv, load_schema, split, synthesize, write_panel_csv
from .policy import GridPoint, ParamSet, PolicySpec, enumerate_grid, load_checkpoint, save_checkpoint
from .state import StateTable
from .trainer import TrainingAborted, TrainResult, evaluate_policy, fit_normalizer_on, train

log = logging.getLogger(__name__)


def git_blob_sha1(data: bytes) -> str:
    """Content hash in git's blob format: ``sha1(b"blob <len>\\0" + data)``."""
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def input_hash(cfg: RunConfig, extra: Sequence[bytes] = ()) -> str:
    parts = [cfg.echo_text().encode()]
    if cfg.source == "csv":
        parts += [cfg.resolve(p).read_bytes() for p in (*cfg.csv, cfg.schema)]
    parts += list(extra)
    return git_blob_sha1(b"\x00".join(parts))


def header_lines(cfg: RunConfig, digest: str, **extra) -> list[str]:
    lines = [f"input_hash: {digest}", f"config: {json.dumps(cfg.echo_dict(), sort_keys=True)}"]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    return lines


@dataclass(frozen=True)
class Data:
    full: ReturnPanel
    train: ReturnPanel
    validation: ReturnPanel
    test: ReturnPanel


def load_panel(cfg: RunConfig) -> ReturnPanel:
    if cfg.source == "csv":
        return load_csv([cfg.resolve(p) for p in cfg.csv], load_schema(cfg.resolve(cfg.schema)))
    return synthesize(cfg.synth)


def prepare_data(cfg: RunConfig) -> Data:
    panel = load_panel(cfg)
    tr, va, te = split(panel, cfg.split, cfg.features.warmup)
    return Data(panel, tr, va, te)


def _write_rows(path: Path, header: Sequence[str], columns: Sequence[str], rows: Sequence[Sequence]) -> Path:
    with open(path, "w", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)
    return path


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float):
        return repr(x)
    return str(x)


# ----------------------------------------------------------------------------
# prepare
# ----------------------------------------------------------------------------

def run_prepare(cfg: RunConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    digest = input_hash(cfg)
    header = header_lines(cfg, digest)
    write_panel_csv(data.full, out / "panel.csv", header)
    rows = []
    for name, p in (("train", data.train), ("validation", data.validation), ("test", data.test)):
        ev = p.dates[p.warmup:]
        rows.append([name, str(ev[0]), str(ev[-1]), len(ev), p.warmup])
    _write_rows(out / "split.csv", header, ["range", "start", "end", "rows", "warmup_rows"], rows)
    return {"rows": data.full.T, "dropped_rows": data.full.dropped_rows, "assets": data.full.m,
            "context": data.full.k, "input_hash": digest,
            **{f"{r[0]}_rows": r[3] for r in rows}}


# ----------------------------------------------------------------------------
# train
# ----------------------------------------------------------------------------

def spec_of(cfg: RunConfig, panel: ReturnPanel) -> PolicySpec:
    return cfg.policy_spec(panel.m, panel.k)


def train_model(cfg: RunConfig, data: Data) -> tuple[PolicySpec, TrainResult]:
    spec = spec_of(cfg, data.train)
    return spec, train(spec, cfg.features, data.train, data.validation, cfg.train_config())


def run_train(cfg: RunConfig, out: Path, figures: bool = True) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    digest = input_hash(cfg)
    try:
        spec, res = train_model(cfg, data)
    except TrainingAborted as exc:
        # keep the last good parameters before reporting the failure
        save_checkpoint(out / "checkpoint.bin", exc.best, cfg.seed, len(exc.log.records) - 1)
        exc.log.write_csv(out / "train_log.csv", header_lines(cfg, digest, aborted=exc.log.aborted or str(exc)))
        raise
    save_checkpoint(out / "checkpoint.bin", res.params, cfg.seed, res.steps)
    res.log.write_csv(out / "train_log.csv", header_lines(cfg, digest, best_epoch=res.log.best_epoch))
    if figures and cfg.figures and len(res.log.records) > 1:
        recs = res.log.records[1:]
        plotting.training_curve([r.epoch for r in recs], [r.train_reward for r in recs],
                                [r.val_metric for r in recs], out / "train_log.png")
    return {"checkpoint": str(out / "checkpoint.bin"), "epochs": cfg.train.epochs, "best_epoch": res.log.best_epoch,
            "best_val_metric": max(r.val_metric for r in res.log.records), "n_params": spec.n_params(),
            "input_hash": digest}


# ----------------------------------------------------------------------------
# evaluate
# ----------------------------------------------------------------------------

def baseline_panel(cfg: RunConfig, data: Data) -> ReturnPanel:
    """Test range with enough leading history for the trailing-window baselines."""
    i0 = int(np.searchsorted(data.full.dates, data.test.dates[data.test.warmup]))
    i1 = i0 + data.test.T - data.test.warmup
    hist = max(cfg.estimation_window, cfg.features.warmup)
    if i0 < hist:
        raise DataError(f"dynamic Markovitz needs {hist} rows before the test range, only {i0} available")
    return data.full.rows(i0 - hist, i1, warmup=hist)


def baseline_reports(cfg: RunConfig, data: Data, digest: str) -> list[BacktestReport]:
    panel = baseline_panel(cfg, data)
    c = cfg.train.commission
    conf = cfg.echo_dict()
    agents = [FixedAllocator(static_markovitz_weights(data.train), "static_markovitz"),
              DynamicMarkovitz(cfg.rebalance_every, cfg.estimation_window),
              naive_winner(data.train)]
    risky = [i for i, n in enumerate(panel.asset_names) if n.lower() != "cash"]
    agents += [single_asset(panel.m, i, f"only_{panel.asset_names[i]}") for i in risky]
    return [run(a, panel, c, label=a.label, config=conf, input_hash=digest) for a in agents]


def evaluate_model(cfg: RunConfig, data: Data, spec: PolicySpec, params: ParamSet, label: str,
                   digest: str, extra_config: dict | None = None) -> BacktestReport:
    _, normalizer = fit_normalizer_on(data.train, cfg.features)
    table = StateTable(data.test, cfg.features, normalizer)
    rep = evaluate_policy(spec, params, table, cfg.train.commission)
    rep.label = label
    rep.config = {**cfg.echo_dict(), **(extra_config or {})}
    rep.input_hash = digest
    return rep


def _regime_mask(data: Data, rep: BacktestReport) -> np.ndarray | None:
    if data.full.regimes is None:
        return None
    idx = np.searchsorted(data.full.dates, rep.dates)
    return data.full.regimes[idx] != 0


def _summary_rows(reports: Sequence[BacktestReport]) -> list[list[str]]:
    rows = []
    for r in reports:
        s = r.summary()
        rows.append([r.label, _fmt(s["annual_return"]), _fmt(s["annual_std"]), _fmt(s["sharpe"]),
                     _fmt(s["sharpe_raw"]), _fmt(s["total_return"]), _fmt(s["max_drawdown"]),
                     _fmt(s["mean_turnover"]), s["n_days"], s["start"], s["end"]])
    return rows


SUMMARY_COLUMNS = ["label", "annual_return", "annual_std", "sharpe", "sharpe_raw", "total_return", "max_drawdown",
                   "mean_turnover", "n_days", "start", "end"]


def write_report(rep: BacktestReport, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rep.write(directory / f"{rep.label}.json", directory / f"{rep.label}.csv")


def run_evaluate(cfg: RunConfig, out: Path, checkpoint: Path | None, figures: bool = True) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    spec = spec_of(cfg, data.train)
    if checkpoint is None:
        raise DataError("evaluate needs --checkpoint")
    params, _, _ = load_checkpoint(checkpoint, spec)
    digest = input_hash(cfg, [Path(checkpoint).read_bytes()])
    drl = evaluate_model(cfg, data, spec, params, "drl", digest)
    reports = [drl, *baseline_reports(cfg, data, digest)]
    rdir = out / "reports"
    for r in reports:
        write_report(r, rdir)
    _write_rows(out / "summary.csv", header_lines(cfg, digest), SUMMARY_COLUMNS, _summary_rows(reports))
    if figures and cfg.figures:
        mask = _regime_mask(data, drl)
        plotting.value_curves(reports, out / "summary_value.png", "test range", mask)
        plotting.allocation(drl, out / "summary_allocation.png", mask)
    s = drl.summary()
    return {"annual_return": s["annual_return"], "sharpe": s["sharpe"], "total_return": s["total_return"],
            "n_days": s["n_days"], "input_hash": digest}


# ----------------------------------------------------------------------------
# grid
# ----------------------------------------------------------------------------

def grid_config(cfg: RunConfig, point: GridPoint) -> RunConfig:
    return cfg.with_overrides(seed=cfg.seed + point.index, **point.overrides())


def _grid_one(cfg: RunConfig, data: Data, point: GridPoint, digest: str) -> BacktestReport:
    pcfg = grid_config(cfg, point)
    spec, res = train_model(pcfg, data)
    axes = {"index": point.index, **point.overrides()}
    return evaluate_model(pcfg, data, spec, res.params, point.label, digest, {"axes": axes})


RANKING_COLUMNS = ["rank", "index", "label", "reward", "adversarial", "network", "prev_weights", "context",
                   "annual_return", "annual_std", "sharpe", "sharpe_raw", "total_return"]


def run_grid(cfg: RunConfig, out: Path, workers: int | None = None, figures: bool = True,
             points: Sequence[GridPoint] | None = None) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    digest = input_hash(cfg)
    points = list(points) if points is not None else enumerate_grid()
    workers = workers or cfg.grid_workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(lambda p: _grid_one(cfg, data, p, digest), points))
    else:
        reports = [_grid_one(cfg, data, p, digest) for p in points]
    for r in reports:
        write_report(r, out / "reports")

    order = sorted(range(len(points)), key=lambda i: (-reports[i].summary()["annual_return"], points[i].index))
    rows = []
    for rank, i in enumerate(order, 1):
        p, s = points[i], reports[i].summary()
        rows.append([rank, p.index, p.label, p.reward, _yn(p.adversarial), p.arch, _yn(p.use_prev_weights),
                     _yn(p.use_context), _fmt(s["annual_return"]), _fmt(s["annual_std"]), _fmt(s["sharpe"]),
                     _fmt(s["sharpe_raw"]), _fmt(s["total_return"])])
    _write_rows(out / "ranking.csv", header_lines(cfg, digest), RANKING_COLUMNS, rows)
    if figures and cfg.figures:
        plotting.ranking_bars([r[2] for r in rows], [reports[i].summary()["annual_return"] for i in order],
                              out / "ranking.png", "annual return (test range)")
    return {"models": len(points), "best": rows[0][2], "best_annual_return": rows[0][8], "input_hash": digest}


def _yn(flag: bool) -> str:
    return "yes" if flag else "no"


# ----------------------------------------------------------------------------
# compare
# ----------------------------------------------------------------------------

def load_reports(paths: Sequence[Path]) -> list[dict]:
    out = []
    for p in paths:
        try:
            rep = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read report {p}: {exc}") from exc
        if "summary" not in rep or "label" not in rep:
            raise DataError(f"{p} is not a backtest report")
        out.append(rep)
    return out


def run_compare(cfg: RunConfig, out: Path, paths: Sequence[Path], figures: bool = True) -> Comparison:
    out.mkdir(parents=True, exist_ok=True)
    if not paths:
        paths = sorted((out / "reports").glob("*.json"))
    reps = load_reports(paths)
    digest = git_blob_sha1(b"\x00".join(Path(p).read_bytes() for p in paths))
    cmp_ = compare(reps)
    header = header_lines(cfg, digest)
    _write_rows(out / "comparison.csv", header, ["label", "annual_return", "annual_std", "sharpe", "sharpe_raw",
                                                 "total_return"],
                [[r["label"], *(_fmt(r[k]) for k in ("annual_return", "annual_std", "sharpe", "sharpe_raw",
                                                     "total_return"))] for r in cmp_.rows])
    _write_rows(out / "context_deltas.csv",
                header + [f"mean_annual_return_delta: {_fmt(cmp_.mean_return_delta)}",
                          f"mean_sharpe_delta: {_fmt(cmp_.mean_sharpe_delta)}"],
                ["with_context", "without_context", "annual_return_delta", "sharpe_delta"],
                [[d["with_context"], d["without_context"], _fmt(d["annual_return_delta"]), _fmt(d["sharpe_delta"])]
                 for d in cmp_.deltas])
    if figures and cfg.figures and cmp_.deltas:
        plotting.ranking_bars([d["with_context"].replace("_ctx-yes", "") for d in cmp_.deltas],
                              [d["annual_return_delta"] for d in cmp_.deltas], out / "context_deltas.png",
                              "annual return with context minus without")
    return cmp_

