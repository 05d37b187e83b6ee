"""Run configuration: flat ``key = value`` text with ``[a, b, c]`` lists.

Every key has a default, so an empty file is a valid config. Unknown keys
are rejected so typos fail loudly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .market_data import Regime, SplitSpec, SynthSpec, uniform_corr
from .policy import PolicySpec
from .state import DEFAULT_LAGS, Features, LagSpec
from .trainer import TrainConfig

_LIST = re.compile(r"^\[(.*)\]$", re.S)


def parse_value(text: str):
    """``true``/``false``, ints, floats, ``[..]`` lists (nestable), otherwise the bare string."""
    text = text.strip()
    m = _LIST.match(text)
    if m:
        body = m.group(1).strip()
        if not body:
            return []
        items, depth, cur = [], 0, ""
        for ch in body:
            if ch == "," and depth == 0:
                items.append(cur)
                cur = ""
                continue
            depth += (ch == "[") - (ch == "]")
            cur += ch
        items.append(cur)
        return [parse_value(x) for x in items]
    low = text.lower()
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_text(text: str, where: str = "<config>") -> dict[str, object]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{where}:{n}: empty key")
        out[key] = parse_value(value)
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(format_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# default synthetic market: three risky strategies plus cash over the default split dates
DEFAULT_REGIMES = (
    Regime(mean=(0.0004, 0.0003, 0.0005), vol=(0.006, 0.004, 0.008), corr=uniform_corr(3, 0.3), duration=120.0),
    Regime(mean=(-0.002, -0.001, -0.0025), vol=(0.012, 0.008, 0.016), corr=uniform_corr(3, 0.6), duration=25.0),
)


@dataclass(frozen=True)
class RunConfig:
    # data
    source: str = "synth"
    csv: tuple[str, ...] = ()
    schema: str = ""
    synth: SynthSpec = SynthSpec(m_risky=3, T=2673, regimes=DEFAULT_REGIMES)
    split: SplitSpec = SplitSpec()
    # features
    asset_lags: tuple[int, ...] = DEFAULT_LAGS
    context_lags: tuple[int, ...] = DEFAULT_LAGS
    std_window: int = 20
    # model and training
    arch: str = "conv"
    use_context: bool = True
    use_prev_weights: bool = False
    conv1_filters: tuple[int, int] = (5, 10)
    conv2_filters: int = 2
    conv_strides: tuple[int, int] = (2, 1)
    lstm_hidden: int = 8
    dense_sizes: tuple[int, int] = (32, 16)
    train: TrainConfig = TrainConfig()
    # baselines
    rebalance_every: int = 63
    estimation_window: int = 252
    # run
    seed: int = 0
    out: str = "runs"
    grid_workers: int = 1
    figures: bool = True
    base_dir: str = field(default=".", compare=False)

    @property
    def features(self) -> Features:
        return Features(LagSpec(self.asset_lags), LagSpec(self.context_lags), self.std_window)

    def policy_spec(self, m: int, k: int) -> PolicySpec:
        f = self.features
        return PolicySpec(m=m, asset_lags=len(f.asset_lags), context_rows=k + 3, context_lags=len(f.context_lags),
                          arch=self.arch, use_context=self.use_context, use_prev_weights=self.use_prev_weights,
                          conv1_filters=self.conv1_filters, conv2_filters=self.conv2_filters,
                          conv_strides=self.conv_strides, lstm_hidden=self.lstm_hidden,
                          dense_sizes=self.dense_sizes)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def with_overrides(self, **kw) -> "RunConfig":
        train_keys = set(TrainConfig.__dataclass_fields__)
        t = {k: v for k, v in kw.items() if k in train_keys}
        rest = {k: v for k, v in kw.items() if k not in train_keys}
        return replace(self, train=replace(self.train, **t), **rest)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def echo(self) -> list[tuple[str, object]]:
        """Resolved configuration as ordered ``(key, value)`` pairs; lags are listed longest first."""
        t = self.train
        rows: list[tuple[str, object]] = [
            ("data.source", self.source),
        ]
        if self.source == "csv":
            rows += [("data.csv", list(self.csv)), ("data.schema", self.schema)]
        else:
            s = self.synth
            rows += [("synth.m_risky", s.m_risky), ("synth.T", s.T), ("synth.start", s.start),
                     ("synth.seed", s.seed), ("synth.context_predictivity", s.context_predictivity)]
            for i, r in enumerate(s.regimes):
                rows += [(f"synth.regime{i}.mean", list(r.mean)), (f"synth.regime{i}.vol", list(r.vol)),
                         (f"synth.regime{i}.corr", [list(x) for x in r.corr]),
                         (f"synth.regime{i}.duration", r.duration)]
        sp = self.split
        rows += [
            ("split.train", list(sp.train)), ("split.validation", list(sp.validation)), ("split.test", list(sp.test)),
            ("features.asset_lags", sorted(self.asset_lags, reverse=True)),
            ("features.context_lags", sorted(self.context_lags, reverse=True)),
            ("features.std_window", self.std_window),
            ("policy.arch", self.arch), ("policy.use_context", self.use_context),
            ("policy.use_prev_weights", self.use_prev_weights),
            ("policy.conv1_filters", list(self.conv1_filters)), ("policy.conv2_filters", self.conv2_filters),
            ("policy.conv_strides", list(self.conv_strides)), ("policy.lstm_hidden", self.lstm_hidden),
            ("policy.dense_sizes", list(self.dense_sizes)),
            ("train.reward", t.reward), ("train.adversarial", t.adversarial), ("train.noise_std", t.noise_std),
            ("train.batch_size", t.batch_size), ("train.episode_length", t.episode_length),
            ("train.epochs", t.epochs), ("train.learning_rate", t.learning_rate), ("train.l2", t.l2),
            ("train.commission_bps", _bps(t.commission)), ("train.record_wall_time", t.record_wall_time),
            ("baselines.rebalance_every", self.rebalance_every),
            ("baselines.estimation_window", self.estimation_window),
            ("seed", self.seed),
        ]
        return rows

    def echo_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.echo())

    def echo_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.echo()}


def _bps(commission: float) -> float | int:
    bps = round(commission * 1e4, 10)
    return int(bps) if float(bps).is_integer() else bps


_SIMPLE = {
    "data.source": "source", "data.schema": "schema",
    "features.std_window": "std_window",
    "policy.arch": "arch", "policy.use_context": "use_context", "policy.use_prev_weights": "use_prev_weights",
    "policy.conv2_filters": "conv2_filters", "policy.lstm_hidden": "lstm_hidden",
    "baselines.rebalance_every": "rebalance_every", "baselines.estimation_window": "estimation_window",
    "seed": "seed", "out": "out", "grid.workers": "grid_workers", "report.figures": "figures",
}
_TUPLES = {
    "data.csv": "csv", "features.asset_lags": "asset_lags", "features.context_lags": "context_lags",
    "policy.conv1_filters": "conv1_filters", "policy.conv_strides": "conv_strides",
    "policy.dense_sizes": "dense_sizes",
}
_TRAIN = {"reward", "adversarial", "noise_std", "batch_size", "episode_length", "epochs", "learning_rate", "l2",
          "record_wall_time"}
_SYNTH = {"m_risky", "T", "start", "seed", "context_predictivity", "corr_window"}
_REGIME = re.compile(r"^synth\.regime(\d+)\.(mean|vol|corr|duration)$")


def _as_tuple(key: str, v) -> tuple:
    if not isinstance(v, list):
        v = [v]
    return tuple(v)


def _regime_corr(v, m: int) -> tuple:
    if isinstance(v, (int, float)):
        return uniform_corr(m, float(v))
    if isinstance(v, list) and v and all(isinstance(r, list) for r in v):
        return tuple(tuple(float(x) for x in r) for r in v)
    if isinstance(v, list) and len(v) == m * m:
        return tuple(tuple(float(x) for x in v[i * m:(i + 1) * m]) for i in range(m))
    raise ConfigError("regime corr must be a scalar, an m x m nested list or a flat list of m*m entries")


def from_mapping(values: dict[str, object], base_dir: str = ".") -> RunConfig:
    cfg = RunConfig(base_dir=base_dir)
    kw: dict[str, object] = {}
    train: dict[str, object] = {}
    synth: dict[str, object] = {}
    regimes: dict[int, dict[str, object]] = {}
    split = {}
    for key, v in values.items():
        if key in _SIMPLE:
            kw[_SIMPLE[key]] = v
        elif key in _TUPLES:
            kw[_TUPLES[key]] = _as_tuple(key, v)
            if key.endswith("_lags"):
                kw[_TUPLES[key]] = tuple(sorted(kw[_TUPLES[key]]))
        elif key.startswith("train.") and key[6:] in _TRAIN:
            train[key[6:]] = v
        elif key == "train.commission_bps":
            train["commission"] = float(v) / 1e4
        elif key.startswith("synth.") and key[6:] in _SYNTH:
            synth[key[6:]] = v
        elif _REGIME.match(key):
            i, field_ = _REGIME.match(key).groups()
            regimes.setdefault(int(i), {})[field_] = v
        elif key.startswith("split.") and key[6:] in ("train", "validation", "test"):
            if not isinstance(v, list) or len(v) != 2:
                raise ConfigError(f"{key} must be [start, end]")
            split[key[6:]] = (str(v[0]), str(v[1]))
        else:
            raise ConfigError(f"unknown config key {key!r}")

    try:
        if train:
            train = {k: (float(v) if k in ("noise_std", "learning_rate", "l2", "commission") else v)
                     for k, v in train.items()}
            kw["train"] = replace(cfg.train, **train)
        if synth or regimes:
            s = cfg.synth
            m = int(synth.get("m_risky", s.m_risky))
            regs = list(s.regimes)
            if regimes:
                if sorted(regimes) != list(range(len(regimes))):
                    raise ConfigError("synth regimes must be numbered 0, 1, 2, ... without gaps")
                regs = []
                for i in sorted(regimes):
                    r = regimes[i]
                    missing = {"mean", "vol", "corr", "duration"} - set(r)
                    if missing:
                        raise ConfigError(f"synth.regime{i} is missing {sorted(missing)}")
                    regs.append(Regime(tuple(float(x) for x in _as_tuple("mean", r["mean"])),
                                       tuple(float(x) for x in _as_tuple("vol", r["vol"])),
                                       _regime_corr(r["corr"], m), float(r["duration"])))
            synth_kw = dict(synth)
            if "start" in synth_kw:
                synth_kw["start"] = str(synth_kw["start"])
            if "context_predictivity" in synth_kw:
                synth_kw["context_predictivity"] = float(synth_kw["context_predictivity"])
            kw["synth"] = replace(s, regimes=tuple(regs), **synth_kw)
        if split:
            kw["split"] = replace(cfg.split, **split)
        cfg = replace(cfg, **kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.source not in ("synth", "csv"):
        raise ConfigError(f"data.source must be 'synth' or 'csv', got {cfg.source!r}")
    if cfg.source == "csv":
        if not cfg.csv or not cfg.schema:
            raise ConfigError("data.source = csv needs data.csv and data.schema")
        for p in (*cfg.csv, cfg.schema):
            if not cfg.resolve(p).is_file():
                raise ConfigError(f"referenced file does not exist: {p}")
    else:
        try:
            cfg.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    if cfg.grid_workers < 1:
        raise ConfigError("grid.workers must be >= 1")
    if cfg.std_window < 2:
        raise ConfigError("features.std_window must be >= 2")
    try:
        cfg.features
        cfg.split.bounds()
        cfg.policy_spec(2, 1)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load(path: str | Path | None) -> RunConfig:
    """Read a config file (``None`` gives the defaults); relative data paths resolve against its directory."""
    if path is None:
        return from_mapping({})
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return from_mapping(parse_text(p.read_text(), str(p)), base_dir=str(p.parent))
