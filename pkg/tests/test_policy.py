import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxdrl import autodiff as ad
from ctxdrl.errors import DataError, ShapeError
from ctxdrl.policy import (
    ParamSet, PolicySpec, StateBatch, checkpoint_json, enumerate_grid, forward, init_params, load_checkpoint,
    policy_weights, save_checkpoint,
)
from ctxdrl.state import StateTensor

VARIANTS = [("conv", False), ("conv", True), ("lstm", False), ("lstm", True)]


def _spec(arch="conv", prev=False, ctx=True, m=4):
    return PolicySpec(m=m, arch=arch, use_prev_weights=prev, use_context=ctx)


def _state(spec, rng, prev=None):
    prev = rng.dirichlet(np.ones(spec.m)) if prev is None else prev
    return StateTensor(rng.normal(size=(2, spec.m, spec.asset_lags)),
                       rng.normal(size=(spec.context_rows, spec.context_lags)), prev)


def _batch(spec, rng, n):
    return StateBatch(rng.normal(size=(n, 2, spec.m, spec.asset_lags)),
                      rng.normal(size=(n, spec.context_rows, spec.context_lags)),
                      rng.dirichlet(np.ones(spec.m), size=n))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def test_init_is_deterministic():
    spec = _spec()
    assert init_params(spec, 7).values.tobytes() == init_params(spec, 7).values.tobytes()
    assert not np.array_equal(init_params(spec, 7).values, init_params(spec, 8).values)


def _conv_len(n, k, s):
    return (n - k) // s + 1


def test_conv_parameter_count_closed_form():
    m, L1, R, L2 = 4, 7, 6, 7
    w1 = _conv_len(L1, 3, 2)             # 3
    w2 = _conv_len(w1, 3, 1)             # 1
    c1 = _conv_len(L2, 3, 1)             # 5
    asset1 = 5 * 2 * 1 * 3 + 5
    asset2 = 10 * 5 * 1 * 3 + 10
    context = 2 * R * 3 + 2
    flat = 10 * m * w2 + 2 * c1
    dense = (flat * 32 + 32) + (32 * 16 + 16) + (16 * m + m)
    expected = asset1 + asset2 + context + dense
    assert expected == 2461
    assert _spec().n_params() == expected
    assert init_params(_spec(), 0).values.size == expected


def test_lstm_parameter_count_closed_form():
    m, H, R = 4, 8, 6
    gates = 4 * H
    expected = ((2 * m + H) * gates + gates) + ((R + H) * gates + gates) \
        + ((2 * H) * 32 + 32) + (32 * 16 + 16) + (16 * m + m)
    assert _spec("lstm").n_params() == expected


def test_conv_geometry_matches_floor_formula():
    for L, s1, s2 in [(7, 2, 1), (9, 1, 1), (11, 2, 2), (15, 3, 1)]:
        spec = PolicySpec(m=3, asset_lags=L, context_lags=L, conv_strides=(s1, s2))
        (_, a), (_, b) = spec.asset_conv_shapes()
        assert a == _conv_len(L, 3, s1) and b == _conv_len(a, 3, s2)
        assert spec.context_conv_length() == _conv_len(L, 3, s2)


def test_slices_cover_vector_exactly():
    for arch, prev in VARIANTS:
        p = init_params(_spec(arch, prev), 0)
        spans = sorted((lo, hi) for lo, hi, _ in p.slices.values())
        assert spans[0][0] == 0 and spans[-1][1] == p.values.size
        assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))


def test_init_biases_and_forget_gate():
    p = init_params(_spec("lstm"), 3)
    H = 8
    assert np.all(p["asset_lstm.bias"][H:2 * H] == 1.0)
    assert np.all(p["asset_lstm.bias"][:H] == 0.0) and np.all(p["dense1.bias"] == 0.0)
    limit = np.sqrt(6.0 / (16 + 32))
    assert np.abs(p["dense2.weight"]).max() <= limit


def test_zero_init_gives_uniform_weights():
    for arch, prev in VARIANTS:
        spec = _spec(arch, prev)
        w = policy_weights(spec, init_params(spec, 0, zero=True), _state(spec, np.random.default_rng(0)))
        assert np.array_equal(w, np.full(4, 0.25))


def test_absent_context_branch_has_no_parameters():
    with_ctx, without = _spec(ctx=True), _spec(ctx=False)
    assert "context_conv.kernel" in dict(with_ctx.layout())
    assert not any(n.startswith("context") for n, _ in without.layout())


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.sampled_from(VARIANTS), st.booleans(), st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_output_on_simplex(variant, ctx, seed, scale):
    spec = _spec(*variant, ctx=ctx)
    rng = np.random.default_rng(seed)
    w = policy_weights(spec, init_params(spec, seed % 1000), _scaled(_batch(spec, rng, 8), scale))
    assert np.all(w >= 0) and np.all(w <= 1)
    assert np.all(np.abs(w.sum(axis=1) - 1.0) < 1e-12)


def _scaled(b, s):
    return StateBatch(b.asset * s, b.context * s, b.prev_weights)


def test_single_state_and_batch_agree():
    spec = _spec("conv", True)
    rng = np.random.default_rng(1)
    params = init_params(spec, 1)
    b = _batch(spec, rng, 5)
    batch_out = policy_weights(spec, params, b)
    for i in range(5):
        one = policy_weights(spec, params, StateTensor(b.asset[i], b.context[i], b.prev_weights[i]))
        assert np.allclose(one, batch_out[i], rtol=0, atol=1e-15)


@pytest.mark.parametrize("arch", ["conv", "lstm"])
def test_prev_weights_ignored_when_branch_absent(arch):
    spec = _spec(arch, prev=False)
    rng = np.random.default_rng(2)
    params = init_params(spec, 2)
    s = _state(spec, rng)
    other = StateTensor(s.asset_block, s.context_block, np.array([1.0, 0, 0, 0]))
    assert policy_weights(spec, params, s).tobytes() == policy_weights(spec, params, other).tobytes()


def test_prev_weights_used_when_branch_present():
    spec = _spec("conv", prev=True)
    rng = np.random.default_rng(2)
    params = init_params(spec, 2)
    s = _state(spec, rng)
    other = StateTensor(s.asset_block, s.context_block, np.array([1.0, 0, 0, 0]))
    assert not np.array_equal(policy_weights(spec, params, s), policy_weights(spec, params, other))


def test_forward_is_pure():
    spec = _spec("lstm", True)
    params = init_params(spec, 5)
    s = _state(spec, np.random.default_rng(5))
    assert policy_weights(spec, params, s).tobytes() == policy_weights(spec, params, s).tobytes()


def test_shape_mismatch_raises():
    spec = _spec()
    s = StateTensor(np.zeros((2, 4, 6)), np.zeros((6, 7)), np.full(4, 0.25))
    with pytest.raises(ShapeError):
        forward(spec, init_params(spec, 0), s)
    with pytest.raises(ShapeError):
        forward(spec, np.zeros(10), _state(spec, np.random.default_rng(0)))


def _swap_equivariant(spec, params):
    """Average the parameters over the symmetry that swaps assets 0 and 1.

    Conv layers act on each asset row with shared kernels, so they commute
    with the swap on their own. The dense stack is made equivariant by
    pairing hidden unit ``i`` with ``i + d/2`` and swapping output columns 0 and 1.
    """
    f2 = spec.conv1_filters[1]
    (_, _), (_, w2) = spec.asset_conv_shapes()
    m = spec.m
    n_asset = f2 * m * w2
    width = dict(spec.layout())["dense1.weight"][0]
    idx = np.arange(width)
    f, i, w = np.unravel_index(idx[:n_asset], (f2, m, w2))
    i = np.where(i == 0, 1, np.where(i == 1, 0, i))
    p_in = idx.copy()
    p_in[:n_asset] = np.ravel_multi_index((f, i, w), (f2, m, w2))

    def pair_perm(d):
        h = d // 2
        return np.concatenate([np.arange(h, d), np.arange(0, h)])

    d1, d2 = spec.dense_sizes
    q1, q2 = pair_perm(d1), pair_perm(d2)
    q3 = np.arange(m)
    q3[[0, 1]] = [1, 0]
    blocks = {n: params[n].copy() for n in params.slices}
    for name, (pin, pout) in {"dense1": (p_in, q1), "dense2": (q1, q2), "out": (q2, q3)}.items():
        W = blocks[f"{name}.weight"]
        blocks[f"{name}.weight"] = 0.5 * (W + W[np.ix_(pin, pout)])
        b = blocks[f"{name}.bias"]
        blocks[f"{name}.bias"] = 0.5 * (b + b[pout])
    return ParamSet.from_vector(spec, np.concatenate([blocks[n].reshape(-1) for n, _ in spec.layout()]))


def test_swapping_two_assets_swaps_their_weights():
    spec = _spec("conv", prev=False)
    rng = np.random.default_rng(11)
    raw = init_params(spec, 11)
    noisy = raw.replace(raw.values + rng.normal(0, 0.05, size=raw.values.size))
    params = _swap_equivariant(spec, noisy)
    s = _state(spec, rng)
    a = s.asset_block.copy()
    a[:, [0, 1]] = a[:, [1, 0]]
    swapped = StateTensor(a, s.context_block, s.prev_weights)
    w = policy_weights(spec, params, s)
    ws = policy_weights(spec, params, swapped)
    assert not np.isclose(w[0], w[1])
    assert np.allclose(ws, w[[1, 0, 2, 3]], rtol=0, atol=1e-14)

    same = s.asset_block.copy()
    same[:, 1] = same[:, 0]
    w_same = policy_weights(spec, params, StateTensor(same, s.context_block, s.prev_weights))
    assert abs(w_same[0] - w_same[1]) < 1e-15


@pytest.mark.parametrize("arch, prev", VARIANTS)
def test_gradient_reaches_every_slice(arch, prev):
    spec = _spec(arch, prev)
    rng = np.random.default_rng(3)
    params = init_params(spec, 3)
    tape = ad.Tape()
    theta = tape.param(params.values)
    w = forward(spec, theta, _batch(spec, rng, 16))
    (g,) = tape.backward(ad.sum(ad.mul(w, rng.normal(size=w.shape))))
    for name, (lo, hi, _) in params.slices.items():
        assert np.any(g[lo:hi] != 0), name


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

def test_grid_has_32_distinct_configurations():
    grid = enumerate_grid()
    assert len(grid) == 32
    assert len({g.label for g in grid}) == 32
    assert len({tuple(g.overrides().items()) for g in grid}) == 32
    assert [g.index for g in grid] == list(range(32))


def test_grid_contains_best_rows():
    combos = {(g.reward, g.adversarial, g.arch, g.use_prev_weights, g.use_context) for g in enumerate_grid()}
    assert ("net_profit", False, "conv", False, True) in combos
    assert ("sharpe", True, "conv", False, True) in combos


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    spec = _spec("lstm", True)
    params = init_params(spec, 9)
    path = tmp_path / "c.bin"
    save_checkpoint(path, params, seed=9, step=17)
    back, seed, step = load_checkpoint(path, spec)
    assert back.values.tobytes() == params.values.tobytes()
    assert (seed, step) == (9, 17)
    blob = path.read_bytes()
    assert blob[:8] == b"CTXDRLCK"
    assert len(blob) == 8 + 4 + 32 + 8 + 8 + 8 + 8 * spec.n_params()


def test_checkpoint_rejects_other_spec_and_truncation(tmp_path):
    spec = _spec()
    path = tmp_path / "c.bin"
    save_checkpoint(path, init_params(spec, 0), 0, 0)
    with pytest.raises(DataError, match="different policy spec"):
        load_checkpoint(path, _spec(ctx=False))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError):
        load_checkpoint(path, spec)
    path.write_bytes(b"short")
    with pytest.raises(DataError):
        load_checkpoint(path, spec)


def test_checkpoint_json_names_every_block():
    spec = _spec()
    doc = checkpoint_json(init_params(spec, 0), 0, 3)
    assert set(doc["params"]) == {n for n, _ in spec.layout()}
    assert doc["n_params"] == 2461 and doc["step"] == 3
