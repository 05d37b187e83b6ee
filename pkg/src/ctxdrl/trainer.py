"""Deterministic policy-gradient training.

Each epoch samples a batch of fixed-length episode windows from the training
range, rolls the policy through them on one tape, averages the episode-end
rewards and takes one Adam ascent step. The environment does not react to
the agent, so episodes are independent and the whole batch is evaluated in
one vectorised pass unless the policy consumes its own previous weights.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backtest import BacktestReport, default_w0, evaluate_weights, sharpe_raw
from .errors import ConfigError, DataError, NumericError
from .market_data import ReturnPanel
from .policy import ParamSet, PolicySpec, StateBatch, forward, init_params
from .state import Features, Normalizer, StateTable, StateTensor

log = logging.getLogger(__name__)

REWARDS = ("net_profit", "sharpe")


@dataclass(frozen=True)
class TrainConfig:
    reward: str = "net_profit"
    adversarial: bool = False
    noise_std: float = 0.002
    batch_size: int = 50
    episode_length: int = 120
    epochs: int = 200
    learning_rate: float = 0.01
    l2: float = 1e-8
    commission: float = 0.001
    seed: int = 0
    record_wall_time: bool = False

    def __post_init__(self):
        if self.reward not in REWARDS:
            raise ConfigError(f"reward must be one of {REWARDS}, got {self.reward!r}")
        if self.noise_std < 0 or self.batch_size < 1 or self.commission < 0:
            raise ConfigError("noise_std >= 0, batch_size >= 1 and commission >= 0 are required")
        if self.episode_length < 2 or self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("episode_length >= 2, epochs >= 0 and learning_rate >= 0 are required")


@dataclass(frozen=True)
class EpisodeWindow:
    """Decision days ``start .. end - 1``; day ``t`` earns the return of ``t + 1``."""

    start: int
    end: int
    w0: np.ndarray | None = None

    def __post_init__(self):
        if self.end - self.start < 2:
            raise DataError("episode window needs at least 2 days")

    @property
    def days(self) -> np.ndarray:
        return np.arange(self.start, self.end)


# ----------------------------------------------------------------------------
# on-tape accounting
# ----------------------------------------------------------------------------

def portfolio_returns(weights, next_returns, w0, commission: float) -> Tensor:
    """Per-day net returns ``[E, L]`` from weights ``[E, L, m]`` (tensor or array)."""
    next_returns = np.asarray(next_returns, dtype=np.float64)
    E, L, m = next_returns.shape
    w0 = np.broadcast_to(np.asarray(w0, dtype=np.float64), (E, m)).reshape(E, 1, m)
    prev = ad.concat([w0, ad.slice(weights, (slice(None), slice(0, L - 1)))], axis=1) if L > 1 else w0
    turnover = ad.sum(ad.abs(ad.sub(weights, prev)), axis=-1)
    gross = ad.sum(ad.mul(weights, next_returns), axis=-1)
    return ad.sub(gross, ad.mul(turnover, commission))


def episode_reward(rho, kind: str) -> Tensor:
    """Reward per episode from daily returns ``[E, L]``: compounded net profit or per-day Sharpe."""
    if kind == "net_profit":
        return ad.sub(ad.prod(ad.add(rho, 1.0), axis=-1), 1.0)
    if kind == "sharpe":
        return ad.div(ad.mean(rho, axis=-1), ad.std(rho, axis=-1))
    raise ConfigError(f"unknown reward {kind!r}")


def add_noise(state: StateTensor, noise_std: float, rng: np.random.Generator) -> StateTensor:
    """Gaussian perturbation of the asset and context blocks (previous weights untouched)."""
    if noise_std < 0:
        raise ConfigError("noise_std must be >= 0")
    if noise_std == 0:
        return state
    a = state.asset_block + rng.normal(0.0, noise_std, size=state.asset_block.shape)
    c = state.context_block + rng.normal(0.0, noise_std, size=state.context_block.shape)
    return StateTensor(a, c, state.prev_weights, state.date)


# ----------------------------------------------------------------------------
# rollouts
# ----------------------------------------------------------------------------

@dataclass
class Rollout:
    rewards: Tensor   # [E]
    weights: Tensor   # [E, L, m]
    rho: Tensor       # [E, L]


def _episode_inputs(table: StateTable, windows: Sequence[EpisodeWindow], noise_std: float,
                    rngs: Sequence[np.random.Generator] | None):
    L = windows[0].end - windows[0].start
    if any(w.end - w.start != L for w in windows):
        raise DataError("all windows in a batch must have the same length")
    for w in windows:
        if w.start < table.first_day or w.end > table.panel.T - 1:
            raise DataError(f"episode window [{w.start}, {w.end}) exceeds usable days "
                            f"[{table.first_day}, {table.panel.T - 1})")
    days = np.stack([w.days for w in windows])                     # [E, L]
    asset, context = table.rows(days.reshape(-1))
    asset = asset.reshape(len(windows), L, *asset.shape[1:])
    context = context.reshape(len(windows), L, *context.shape[1:])
    if noise_std > 0:
        if rngs is None:
            raise ConfigError("noise requires per-episode generators")
        asset = asset.copy()
        context = context.copy()
        for i, rng in enumerate(rngs):
            asset[i] += rng.normal(0.0, noise_std, size=asset[i].shape)
            context[i] += rng.normal(0.0, noise_std, size=context[i].shape)
    nxt = table.next_returns(days.reshape(-1)).reshape(len(windows), L, table.m)
    w0 = np.stack([default_w0(table.panel) if w.w0 is None else np.asarray(w.w0, dtype=np.float64)
                   for w in windows])
    return days, asset, context, nxt, w0


def policy_path(spec: PolicySpec, theta, asset: np.ndarray, context: np.ndarray, w0: np.ndarray):
    """Weights ``[E, L, m]`` for state sequences ``asset [E, L, ...]``, ``context [E, L, ...]``.

    Without the previous-weights branch all days go through the network in
    one batch; with it the days are chained so each output feeds the next
    state (through the tape when ``theta`` is on one).
    """
    E, L = asset.shape[:2]
    if not spec.use_prev_weights:
        batch = StateBatch(asset.reshape(E * L, *asset.shape[2:]), context.reshape(E * L, *context.shape[2:]),
                           np.zeros((E * L, spec.m)))
        return ad.reshape(forward(spec, theta, batch), (E, L, spec.m))
    prev = w0
    outs = []
    for j in range(L):
        prev = forward(spec, theta, StateBatch(asset[:, j], context[:, j], prev))
        outs.append(prev)
    return ad.stack(outs, axis=1)


def roll_episodes(spec: PolicySpec, theta, table: StateTable, windows: Sequence[EpisodeWindow],
                  config: TrainConfig, rngs: Sequence[np.random.Generator] | None = None) -> Rollout:
    """Roll the policy through equal-length windows; ``theta`` is a flat Tensor (on a tape) or ParamSet."""
    if isinstance(theta, ParamSet):
        theta = Tensor(theta.values)
    noise = config.noise_std if config.adversarial else 0.0
    _, asset, context, nxt, w0 = _episode_inputs(table, windows, noise, rngs)
    weights = policy_path(spec, theta, asset, context, w0)
    rho = portfolio_returns(weights, nxt, w0, config.commission)
    return Rollout(episode_reward(rho, config.reward), weights, rho)


def roll_episode(spec: PolicySpec, params, window: EpisodeWindow, table: StateTable, config: TrainConfig,
                 tape: ad.Tape | None = None, rng: np.random.Generator | None = None):
    """One episode: ``(reward node, weights [L, m], daily returns [L])``."""
    theta = params
    if tape is not None and not isinstance(params, Tensor):
        theta = tape.param(params.values if isinstance(params, ParamSet) else params)
    out = roll_episodes(spec, theta, table, [window], config, None if rng is None else [rng])
    reward = ad.reshape(out.rewards, ())
    return reward, out.weights.data[0], out.rho.data[0]


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------

class PolicyAgent:
    """Wraps a trained policy for the backtester (no noise, no tape, no RNG)."""

    def __init__(self, spec: PolicySpec, params: ParamSet, features: Features, normalizer: Normalizer,
                 label: str = "drl"):
        self.spec = spec
        self.params = params
        self.features = features
        self.normalizer = normalizer
        self.label = label
        self._tables: dict[int, StateTable] = {}

    def table(self, panel: ReturnPanel) -> StateTable:
        key = id(panel)
        if key not in self._tables:
            self._tables = {key: StateTable(panel, self.features, self.normalizer)}
        return self._tables[key]

    def weight_path(self, panel: ReturnPanel, days, w0) -> np.ndarray:
        table = self.table(panel)
        days = np.asarray(days)
        if days.min() < table.first_day:
            raise DataError(f"decision day {days.min()} precedes the first complete state {table.first_day}")
        asset, context = table.rows(days)
        w = policy_path(self.spec, Tensor(self.params.values), asset[None], context[None], np.asarray(w0)[None])
        return w.data[0]


def evaluate_policy(spec: PolicySpec, params: ParamSet, table: StateTable, commission: float):
    days = table.eval_days()
    agent = PolicyAgent(spec, params, table.features, table.normalizer)
    agent._tables = {id(table.panel): table}
    weights = agent.weight_path(table.panel, days, default_w0(table.panel))
    return evaluate_weights(table.panel, weights, commission, (int(days[0]) + 1, int(days[-1]) + 2))


def validation_metric(report, reward: str) -> float:
    if reward == "net_profit":
        return report.total_return
    s = sharpe_raw(report.returns)
    return float("-inf") if s is None else s


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_reward: float
    val_metric: float
    grad_norm: float
    wall_ms: float | None


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    aborted: str | None = None

    def write_csv(self, path: str | Path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_reward", "val_metric", "grad_norm", "wall_ms"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_reward), repr(r.val_metric), repr(r.grad_norm),
                            "na" if r.wall_ms is None else f"{r.wall_ms:.3f}"])


class TrainingAborted(NumericError):
    def __init__(self, message: str, best: ParamSet, log_: TrainLog):
        super().__init__(message)
        self.best = best
        self.log = log_


@dataclass
class TrainResult:
    params: ParamSet
    log: TrainLog
    normalizer: Normalizer
    steps: int


def fit_normalizer_on(panel: ReturnPanel, features: Features) -> tuple[StateTable, Normalizer]:
    raw = StateTable(panel, features)
    norm = Normalizer.fit(raw.raw_asset, raw.raw_context)
    return raw.with_normalizer(norm), norm


def spec_for(panel: ReturnPanel, features: Features, **kwargs) -> PolicySpec:
    return PolicySpec(m=panel.m, asset_lags=len(features.asset_lags), context_rows=panel.k + 3,
                      context_lags=len(features.context_lags), **kwargs)


def train(spec: PolicySpec, features: Features, panel_train: ReturnPanel, panel_val: ReturnPanel,
          config: TrainConfig, init: ParamSet | None = None,
          on_epoch: Callable[[int, ParamSet, BacktestReport], None] | None = None) -> TrainResult:
    """Train with Adam ascent and keep the parameters with the best validation metric.

    ``on_epoch(epoch, params, validation_report)`` is called after every update.
    """
    table, normalizer = fit_normalizer_on(panel_train, features)
    val_table = StateTable(panel_val, features, normalizer)
    L = config.episode_length
    lo, hi = table.first_day, panel_train.T - 1 - L   # inclusive range of window starts
    if hi < lo:
        raise DataError(f"empty sampling range: training panel has {panel_train.T} rows, "
                        f"needs {table.first_day + L + 1} for {L}-day episodes")

    params = init if init is not None else init_params(spec, config.seed)
    values = params.values.copy()
    adam = ad.AdamState(learning_rate=config.learning_rate, l2=config.l2)
    train_log = TrainLog()

    best_values = values.copy()
    best_metric = validation_metric(evaluate_policy(spec, params, val_table, config.commission), config.reward)
    train_log.records.append(EpochRecord(0, float("nan"), best_metric, 0.0, 0.0 if config.record_wall_time else None))

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        starts = rng.integers(lo, hi + 1, size=config.batch_size)
        windows = [EpisodeWindow(int(s), int(s) + L) for s in starts]
        rngs = [np.random.default_rng([config.seed, epoch, i]) for i in range(config.batch_size)]

        tape = ad.Tape()
        theta = tape.param(values)
        out = roll_episodes(spec, theta, table, windows, config, rngs)
        keep = np.arange(config.batch_size)
        if config.reward == "sharpe":
            sd = out.rho.data.std(axis=1, ddof=1)
            keep = np.flatnonzero(sd >= 1e-12)
            if keep.size < config.batch_size:
                log.warning("epoch %d: %d episodes rejected (zero return dispersion)", epoch,
                            config.batch_size - keep.size)
            if keep.size == 0:
                raise TrainingAborted(f"epoch {epoch}: every episode had zero return dispersion",
                                      params.replace(best_values), train_log)
        objective = ad.mean(ad.slice(out.rewards, keep) if keep.size < config.batch_size else out.rewards)
        obj_value = float(objective.data)
        if not np.isfinite(obj_value):
            train_log.aborted = f"non-finite objective at epoch {epoch}"
            raise TrainingAborted(train_log.aborted, params.replace(best_values), train_log)
        (grad,) = tape.backward(objective)
        try:
            values = ad.adam_step(adam, values, grad, maximize=True)
        except NumericError as exc:
            train_log.aborted = str(exc)
            raise TrainingAborted(str(exc), params.replace(best_values), train_log) from exc

        current = params.replace(values)
        report = evaluate_policy(spec, current, val_table, config.commission)
        metric = validation_metric(report, config.reward)
        if on_epoch is not None:
            on_epoch(epoch, current, report)
        if metric > best_metric:
            best_metric, best_values, train_log.best_epoch = metric, values.copy(), epoch
        wall = (time.perf_counter() - t0) * 1e3 if config.record_wall_time else None
        train_log.records.append(EpochRecord(epoch, obj_value, metric, float(np.linalg.norm(grad)), wall))

    return TrainResult(params.replace(best_values), train_log, normalizer, adam.step)


def config_dict(config: TrainConfig) -> dict:
    return json.loads(json.dumps(asdict(config)))
