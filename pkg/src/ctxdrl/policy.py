"""Multi-branch allocation policy.

Asset branch (two Conv2D layers or an LSTM) over the ``[2, m, L1]`` asset
block, context branch (one Conv1D layer or an LSTM) over the ``[R, L2]``
context block, optional raw previous weights, then two ReLU dense layers and
a softmax over the ``m`` assets.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError
from .state import StateTensor


@dataclass(frozen=True)
class PolicySpec:
    m: int
    asset_lags: int = 7
    context_rows: int = 6
    context_lags: int = 7
    arch: str = "conv"
    use_context: bool = True
    use_prev_weights: bool = False
    conv1_filters: tuple[int, int] = (5, 10)
    conv2_filters: int = 2
    conv_strides: tuple[int, int] = (2, 1)
    conv1_kernel: tuple[int, int] = (1, 3)
    conv2_kernel: int = 3
    lstm_hidden: int = 8
    dense_sizes: tuple[int, int] = (32, 16)

    def __post_init__(self):
        for name in ("conv1_filters", "conv_strides", "conv1_kernel", "dense_sizes"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        if self.arch not in ("conv", "lstm"):
            raise ConfigError(f"arch must be 'conv' or 'lstm', got {self.arch!r}")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if len(self.conv1_filters) != 2 or len(self.conv_strides) != 2 or len(self.dense_sizes) != 2:
            raise ConfigError("conv1_filters, conv_strides and dense_sizes take exactly two entries")
        counts = (*self.conv1_filters, self.conv2_filters, *self.conv_strides, *self.dense_sizes,
                  *self.conv1_kernel, self.conv2_kernel, self.lstm_hidden)
        if min(counts) < 1:
            raise ConfigError("filter counts, strides, kernels and widths must be >= 1")
        if self.arch == "conv":
            self.asset_conv_shapes()
            if self.use_context:
                self.context_conv_length()

    # -- conv geometry --------------------------------------------------------
    def asset_conv_shapes(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """(height, width) after each asset conv layer."""
        kh, kw = self.conv1_kernel
        s1, s2 = self.conv_strides
        h1, w1 = self.m - kh + 1, (self.asset_lags - kw) // s1 + 1
        h2, w2 = (h1 - kh) // 1 + 1, (w1 - kw) // s2 + 1
        if min(h1, w1, h2, w2) < 1 or self.asset_lags < kw:
            raise ConfigError(f"asset conv kernels {self.conv1_kernel} do not fit an input of "
                              f"{self.m} assets x {self.asset_lags} lags")
        return (h1, w1), (h2, w2)

    def context_conv_length(self) -> int:
        if self.context_lags < self.conv2_kernel:
            raise ConfigError(f"context kernel {self.conv2_kernel} longer than {self.context_lags} lags")
        return (self.context_lags - self.conv2_kernel) // self.conv_strides[1] + 1

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Named parameter blocks in flat-vector order."""
        out: list[tuple[str, tuple[int, ...]]] = []
        H = self.lstm_hidden
        if self.arch == "conv":
            f1, f2 = self.conv1_filters
            kh, kw = self.conv1_kernel
            out += [("asset_conv1.kernel", (f1, 2, kh, kw)), ("asset_conv1.bias", (f1,)),
                    ("asset_conv2.kernel", (f2, f1, kh, kw)), ("asset_conv2.bias", (f2,))]
            (_, _), (h2, w2) = self.asset_conv_shapes()
            width = f2 * h2 * w2
            if self.use_context:
                out += [("context_conv.kernel", (self.conv2_filters, self.context_rows, self.conv2_kernel)),
                        ("context_conv.bias", (self.conv2_filters,))]
                width += self.conv2_filters * self.context_conv_length()
        else:
            out += [("asset_lstm.weight", (2 * self.m + H, 4 * H)), ("asset_lstm.bias", (4 * H,))]
            width = H
            if self.use_context:
                out += [("context_lstm.weight", (self.context_rows + H, 4 * H)), ("context_lstm.bias", (4 * H,))]
                width += H
        if self.use_prev_weights:
            width += self.m
        d1, d2 = self.dense_sizes
        out += [("dense1.weight", (width, d1)), ("dense1.bias", (d1,)),
                ("dense2.weight", (d1, d2)), ("dense2.bias", (d2,)),
                ("out.weight", (d2, self.m)), ("out.bias", (self.m,))]
        return out

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout())

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).digest()


@dataclass(frozen=True, eq=False)
class ParamSet:
    spec: PolicySpec
    values: np.ndarray
    slices: dict[str, tuple[int, int, tuple[int, ...]]] = field(repr=False)

    @classmethod
    def from_vector(cls, spec: PolicySpec, values) -> "ParamSet":
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.size != spec.n_params():
            raise ShapeError(f"expected {spec.n_params()} parameters, got {values.size}")
        slices, off = {}, 0
        for name, shape in spec.layout():
            n = int(np.prod(shape))
            slices[name] = (off, off + n, shape)
            off += n
        values.flags.writeable = False
        return cls(spec, values, slices)

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi, shape = self.slices[name]
        return self.values[lo:hi].reshape(shape)

    def replace(self, values) -> "ParamSet":
        return ParamSet.from_vector(self.spec, values)


def init_params(spec: PolicySpec, seed: int, zero: bool = False) -> ParamSet:
    """Glorot-uniform kernels and dense weights, zero biases, LSTM forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in spec.layout():
        if zero or name.endswith(".bias"):
            block = np.zeros(shape)
            if not zero and "lstm" in name:
                H = shape[0] // 4
                block[H:2 * H] = 1.0
        else:
            if len(shape) >= 3:  # conv kernel [F, C, *k]
                rf = int(np.prod(shape[2:]))
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            block = rng.uniform(-limit, limit, size=shape)
        parts.append(block.reshape(-1))
    return ParamSet.from_vector(spec, np.concatenate(parts))


# ----------------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------------

@dataclass
class StateBatch:
    asset: np.ndarray | Tensor     # [B, 2, m, L1]
    context: np.ndarray | Tensor   # [B, R, L2]
    prev_weights: np.ndarray | Tensor  # [B, m]


def _unpack(spec: PolicySpec, params) -> dict[str, Tensor]:
    if isinstance(params, ParamSet):
        theta = Tensor(params.values)
    elif isinstance(params, Tensor):
        theta = params
    else:
        theta = Tensor(np.asarray(params, dtype=np.float64))
    if theta.shape != (spec.n_params(),):
        raise ShapeError(f"parameter vector has shape {theta.shape}, expected ({spec.n_params()},)")
    out, off = {}, 0
    for name, shape in spec.layout():
        n = int(np.prod(shape))
        out[name] = ad.reshape(ad.slice(theta, slice(off, off + n)), shape)
        off += n
    return out


def _lstm_branch(seq: list, weight: Tensor, bias: Tensor, hidden: int, batch: int) -> Tensor:
    hc = np.zeros((batch, 2 * hidden))
    for x in seq:
        hc = ad.lstm_cell(x, hc, weight, bias)
    return ad.slice(hc, (slice(None), slice(0, hidden)))


def forward(spec: PolicySpec, params, state, tape: ad.Tape | None = None) -> Tensor:
    """Portfolio weights for one :class:`StateTensor` (``[m]``) or a :class:`StateBatch` (``[B, m]``).

    ``params`` may be a ParamSet, a flat array, or a flat Tensor already on a
    tape; ``tape`` is only needed to attach a ParamSet/array as a parameter.
    """
    single = isinstance(state, StateTensor)
    if single:
        state = StateBatch(state.asset_block[None], state.context_block[None], state.prev_weights[None])
    if tape is not None and not isinstance(params, Tensor):
        params = tape.param(params.values if isinstance(params, ParamSet) else params)
    p = _unpack(spec, params)

    asset, context, prev = state.asset, state.context, state.prev_weights
    B = asset.shape[0]
    if asset.shape[1:] != (2, spec.m, spec.asset_lags):
        raise ShapeError(f"asset block shape {asset.shape[1:]} != {(2, spec.m, spec.asset_lags)}")
    if spec.use_context and context.shape[1:] != (spec.context_rows, spec.context_lags):
        raise ShapeError(f"context block shape {context.shape[1:]} != {(spec.context_rows, spec.context_lags)}")
    if spec.use_prev_weights and prev.shape != (B, spec.m):
        raise ShapeError(f"prev weights shape {prev.shape} != {(B, spec.m)}")

    feats = []
    if spec.arch == "conv":
        s1, s2 = spec.conv_strides
        h = ad.relu(ad.conv2d(asset, p["asset_conv1.kernel"], p["asset_conv1.bias"], stride=(1, s1)))
        h = ad.relu(ad.conv2d(h, p["asset_conv2.kernel"], p["asset_conv2.bias"], stride=(1, s2)))
        feats.append(ad.reshape(h, (B, -1)))
        if spec.use_context:
            c = ad.relu(ad.conv1d(context, p["context_conv.kernel"], p["context_conv.bias"], stride=s2))
            feats.append(ad.reshape(c, (B, -1)))
    else:
        H = spec.lstm_hidden
        # oldest lag first so the final hidden state leans on the most recent data
        seq = [ad.reshape(ad.slice(asset, (slice(None), slice(None), slice(None), j)), (B, 2 * spec.m))
               for j in range(spec.asset_lags - 1, -1, -1)]
        feats.append(_lstm_branch(seq, p["asset_lstm.weight"], p["asset_lstm.bias"], H, B))
        if spec.use_context:
            seq = [ad.slice(context, (slice(None), slice(None), j)) for j in range(spec.context_lags - 1, -1, -1)]
            feats.append(_lstm_branch(seq, p["context_lstm.weight"], p["context_lstm.bias"], H, B))
    if spec.use_prev_weights:
        feats.append(prev)

    x = feats[0] if len(feats) == 1 else ad.concat(feats, axis=1)
    x = ad.relu(ad.matmul(x, p["dense1.weight"]) + p["dense1.bias"])
    x = ad.relu(ad.matmul(x, p["dense2.weight"]) + p["dense2.bias"])
    w = ad.softmax(ad.matmul(x, p["out.weight"]) + p["out.bias"])
    return ad.reshape(w, (spec.m,)) if single else w


def policy_weights(spec: PolicySpec, params: ParamSet, state) -> np.ndarray:
    """Detached forward pass (no tape)."""
    return forward(spec, params, state).data


# ----------------------------------------------------------------------------
# experiment grid
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class GridPoint:
    index: int
    reward: str
    adversarial: bool
    arch: str
    use_prev_weights: bool
    use_context: bool

    @property
    def label(self) -> str:
        yn = {True: "yes", False: "no"}
        reward = {"net_profit": "netprofit", "sharpe": "sharpe"}[self.reward]
        net = {"conv": "conv2d", "lstm": "lstm"}[self.arch]
        return (f"{reward}_adv-{yn[self.adversarial]}_{net}_prev-{yn[self.use_prev_weights]}"
                f"_ctx-{yn[self.use_context]}")

    def overrides(self) -> dict:
        return {"reward": self.reward, "adversarial": self.adversarial, "arch": self.arch,
                "use_prev_weights": self.use_prev_weights, "use_context": self.use_context}


def enumerate_grid() -> list[GridPoint]:
    """Reward x adversarial x network x previous-weights x context: 32 configurations."""
    axes = itertools.product(("net_profit", "sharpe"), (False, True), ("conv", "lstm"), (False, True), (True, False))
    return [GridPoint(i, *combo) for i, combo in enumerate(axes)]


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

MAGIC = b"CTXDRLCK"
VERSION = 1
_HEADER = struct.Struct("<8sI32sqQQ")


def save_checkpoint(path: str | Path, params: ParamSet, seed: int, step: int) -> None:
    """Write the little-endian binary checkpoint (layout documented in the README)."""
    header = _HEADER.pack(MAGIC, VERSION, params.spec.digest(), int(seed), int(step), params.values.size)
    Path(path).write_bytes(header + params.values.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, spec: PolicySpec) -> tuple[ParamSet, int, int]:
    """Return ``(params, seed, step)``; the stored spec digest must match ``spec``."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataError(f"{path}: truncated checkpoint header")
    magic, version, digest, seed, step, n = _HEADER.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise DataError(f"{path}: not a checkpoint (magic {magic!r}, version {version})")
    if digest != spec.digest():
        raise DataError(f"{path}: checkpoint was written for a different policy spec")
    body = blob[_HEADER.size:]
    if len(body) != 8 * n:
        raise DataError(f"{path}: expected {n} float64 values, found {len(body)} bytes")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return ParamSet.from_vector(spec, values), seed, step


def checkpoint_json(params: ParamSet, seed: int, step: int) -> dict:
    return {
        "spec": asdict(params.spec),
        "spec_sha256": params.spec.digest().hex(),
        "seed": int(seed),
        "step": int(step),
        "n_params": int(params.values.size),
        "params": {name: params[name].tolist() for name in params.slices},
    }
