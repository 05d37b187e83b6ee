import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxdrl import autodiff as ad
from ctxdrl.errors import NumericError, ShapeError

from gradcheck import central_diff, max_rel_err


def _check(build, *arrays, tol=1e-5):
    """Reverse-mode gradient of ``sum(build(*x) * c)`` vs central differences, for every input."""
    rng = np.random.default_rng(123)
    out_shape = build(*arrays).shape
    c = rng.normal(size=out_shape)

    tape = ad.Tape()
    params = [tape.param(a) for a in arrays]
    obj = ad.sum(ad.mul(build(*params), c))
    grads = tape.backward(obj)

    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = list(arrays)
            args[k] = x
            return float((build(*args).data * c).sum())
        num = central_diff(f, a)
        assert max_rel_err(grads[k], num) < tol, f"input {k}"


def _away_from_zero(rng, shape, lo=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo, x)


# ---------------------------------------------------------------------------
# spec examples
# ---------------------------------------------------------------------------

def test_softmax_of_zeros_is_uniform():
    assert np.allclose(ad.softmax(np.zeros(4)).data, 0.25, atol=0, rtol=0)


def test_conv1d_output_length():
    x = np.zeros((1, 1, 7))
    k = np.zeros((1, 1, 3))
    assert ad.conv1d(x, k, stride=2).shape == (1, 1, 3)


def test_matmul_gradient_matches_central_difference():
    rng = np.random.default_rng(0)
    _check(lambda a, b: ad.matmul(a, b), rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), tol=1e-6)


def test_sum_gradient_is_ones():
    tape = ad.Tape()
    x = tape.param(np.arange(6.0).reshape(2, 3))
    (g,) = tape.backward(ad.sum(x))
    assert np.array_equal(g, np.ones((2, 3)))


def test_softmax_jacobian_rows_sum_to_zero():
    rng = np.random.default_rng(1)
    c = rng.normal(size=5)
    tape = ad.Tape()
    x = tape.param(rng.normal(size=5))
    (g,) = tape.backward(ad.sum(ad.mul(ad.softmax(x), c)))
    assert abs(g.sum()) < 1e-14


def test_constants_get_no_gradient_and_params_align():
    tape = ad.Tape()
    a = tape.param([1.0, 2.0])
    const = np.array([3.0, 4.0])
    b = tape.param([5.0, 6.0])
    grads = tape.backward(ad.sum(a * const + b * b))
    assert len(grads) == 2
    assert np.allclose(grads[0], const)
    assert np.allclose(grads[1], [10.0, 12.0])


def test_unused_param_gets_zero_gradient():
    tape = ad.Tape()
    a = tape.param([1.0])
    tape.param([2.0])
    grads = tape.backward(ad.sum(a))
    assert grads[1].tolist() == [0.0]


def test_objective_must_be_scalar():
    tape = ad.Tape()
    x = tape.param(np.ones(3))
    with pytest.raises(ShapeError):
        tape.backward(x * 2.0)


def test_node_not_on_tape():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.param(np.ones(2))
    with pytest.raises(ShapeError):
        t2.backward(ad.sum(x))
    y = t2.param(np.ones(2))
    with pytest.raises(ShapeError):
        ad.add(x, y)


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeError):
        ad.mean(np.ones((0,)))
    with pytest.raises(ShapeError):
        ad.conv1d(np.ones((1, 1, 2)), np.ones((1, 1, 3)))
    with pytest.raises(ShapeError):
        ad.conv1d(np.ones((1, 1, 5)), np.ones((1, 1, 3)), stride=0)


def test_std_uses_sample_denominator():
    x = np.array([0.01, -0.01])
    assert ad.std(x, eps=0.0).data == pytest.approx(0.02 / np.sqrt(2), rel=1e-15)


def test_prod_gradient_handles_zero_entry():
    tape = ad.Tape()
    x = tape.param([2.0, 0.0, 3.0])
    (g,) = tape.backward(ad.prod(x))
    assert g.tolist() == [0.0, 6.0, 0.0]


def test_detached_ops_record_nothing():
    out = ad.relu(ad.Tensor([-1.0, 2.0]))
    assert out.tape is None
    assert out.data.tolist() == [0.0, 2.0]


# ---------------------------------------------------------------------------
# per-primitive finite-difference checks
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
def test_binary_broadcast_gradients(name):
    rng = np.random.default_rng(2)
    fn = getattr(ad, name)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(1, 4))
    _check(lambda x, y: fn(x, y), a, b)


def test_lstm_cell_gradients():
    rng = np.random.default_rng(3)
    n_in, H = 3, 4
    x = rng.normal(size=(5, n_in))
    hc = rng.normal(size=(5, 2 * H))
    w = rng.normal(scale=0.5, size=(n_in + H, 4 * H))
    b = rng.normal(size=4 * H)
    _check(lambda x_, hc_, w_, b_: ad.lstm_cell(x_, hc_, w_, b_), x, hc, w, b)


def test_conv2d_gradients_with_strides():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 4, 7))
    k = rng.normal(size=(5, 2, 1, 3))
    b = rng.normal(size=5)
    _check(lambda x_, k_, b_: ad.conv2d(x_, k_, b_, stride=(1, 2)), x, k, b)
    _check(lambda x_, k_: ad.conv2d(x_, k_, stride=(2, 1)), rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(2, 3, 2, 2)))


def test_reductions_and_structure_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4))
    _check(lambda a: ad.mean(a, axis=1), x)
    _check(lambda a: ad.std(a, axis=0), x)
    _check(lambda a: ad.prod(a + 2.0, axis=1), x)
    _check(lambda a: ad.slice(a, (slice(None), slice(1, 3))), x)
    _check(lambda a: ad.slice(a, (slice(None), [0, 0, 2])), x)
    _check(lambda a: ad.reshape(a, (2, 6)), x)
    _check(lambda a: ad.concat([a, a * 2.0], axis=0), x)
    _check(lambda a: ad.stack([a, a * a], axis=1), x)
    _check(lambda a: ad.softmax(a), x)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    batch=st.integers(1, 3),
    channels=st.integers(1, 3),
    filters=st.integers(1, 3),
    length=st.integers(3, 9),
    kernel=st.integers(1, 3),
    stride=st.integers(1, 3),
)
def test_conv1d_property(seed, batch, channels, filters, length, kernel, stride):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, channels, length))
    k = rng.normal(size=(filters, channels, kernel))
    b = rng.normal(size=filters)
    assert ad.conv1d(x, k, b, stride=stride).shape[-1] == (length - kernel) // stride + 1
    _check(lambda x_, k_, b_: ad.conv1d(x_, k_, b_, stride=stride), x, k, b)


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    rows=st.integers(1, 4),
    inner=st.integers(1, 4),
    cols=st.integers(1, 4),
    op=st.sampled_from(["matmul", "relu", "abs", "softmax", "sum", "mean", "std", "prod", "mul", "div"]),
)
def test_elementwise_and_matmul_property(seed, rows, inner, cols, op):
    rng = np.random.default_rng(seed)
    if op == "matmul":
        _check(ad.matmul, rng.normal(size=(rows, inner)), rng.normal(size=(inner, cols)))
        return
    x = _away_from_zero(rng, (rows + 1, cols))
    if op in ("relu", "abs", "softmax"):
        _check(getattr(ad, op), x)
    elif op in ("sum", "mean", "std"):
        _check(lambda a: getattr(ad, op)(a, axis=0), x)
    elif op == "prod":
        _check(lambda a: ad.prod(a, axis=1), x)
    else:
        y = rng.uniform(0.5, 2.0, size=(cols,))
        _check(lambda a, b: getattr(ad, op)(a, b), x, y)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n_in=st.integers(1, 4), hidden=st.integers(1, 4))
def test_lstm_property(seed, n_in, hidden):
    rng = np.random.default_rng(seed)
    _check(
        ad.lstm_cell,
        rng.normal(size=(2, n_in)),
        rng.normal(size=(2, 2 * hidden)),
        rng.normal(scale=0.7, size=(n_in + hidden, 4 * hidden)),
        rng.normal(size=4 * hidden),
    )


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 8), scale=st.floats(1e-3, 1e3))
def test_softmax_simplex_property(seed, n, scale):
    x = np.random.default_rng(seed).normal(scale=scale, size=(3, n))
    s = ad.softmax(x).data
    assert np.all(s >= 0) and np.all(s <= 1)
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) < 1e-12)


# ---------------------------------------------------------------------------
# tape replay
# ---------------------------------------------------------------------------

def _small_graph(tape, p):
    h = ad.relu(ad.matmul(np.ones((2, 3)), p))
    return ad.sum(ad.softmax(h) * np.array([1.0, -2.0]))


def test_replay_is_bit_identical_and_tracks_new_values():
    rng = np.random.default_rng(6)
    p0 = rng.normal(size=(3, 2))
    tape = ad.Tape()
    obj = _small_graph(tape, tape.param(p0))
    v0, g0 = tape.value(obj).copy(), tape.backward(obj)[0].copy()

    tape.replay([p0])
    assert tape.value(obj).tobytes() == v0.tobytes()
    assert tape.backward(obj)[0].tobytes() == g0.tobytes()

    p1 = p0 + 0.3
    tape.replay([p1])
    fresh = ad.Tape()
    obj2 = _small_graph(fresh, fresh.param(p1))
    assert tape.value(obj).tobytes() == fresh.value(obj2).tobytes()
    assert tape.backward(obj)[0].tobytes() == fresh.backward(obj2)[0].tobytes()


def test_param_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.Tape().param([np.nan])


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_no_l2_leaves_params():
    state = ad.AdamState(learning_rate=0.01, l2=0.0)
    p = np.array([0.5, -1.0, 2.0])
    out = ad.adam_step(state, p, np.zeros(3))
    assert np.array_equal(out, p)


def test_adam_first_step_moves_by_learning_rate():
    state = ad.AdamState(learning_rate=0.01, l2=0.0)
    p = np.zeros(4)
    g = np.array([3.0, -0.2, 1e-3, 0.0])
    out = ad.adam_step(state, p, g, maximize=True)
    # bias-corrected m/sqrt(v) = sign(g) on the first step
    assert np.allclose(out[:3], 0.01 * np.sign(g[:3]), rtol=1e-4)
    assert out[3] == 0.0
    state2 = ad.AdamState(learning_rate=0.01, l2=0.0)
    assert np.allclose(ad.adam_step(state2, p, g, maximize=False)[:3], -0.01 * np.sign(g[:3]), rtol=1e-4)


def test_adam_default_learning_rate():
    assert ad.AdamState().learning_rate == 0.01
    assert ad.AdamState().l2 == 1e-8


def test_adam_l2_pulls_toward_zero_under_ascent():
    state = ad.AdamState(learning_rate=0.01, l2=1.0)
    out = ad.adam_step(state, np.array([2.0, -2.0]), np.zeros(2), maximize=True)
    assert out[0] < 2.0 and out[1] > -2.0


def test_adam_rejects_nan():
    with pytest.raises(NumericError):
        ad.adam_step(ad.AdamState(), np.zeros(2), np.array([np.nan, 0.0]))


def test_adam_preserves_shape():
    state = ad.AdamState()
    p = np.ones((2, 3))
    for _ in range(3):
        p = ad.adam_step(state, p, np.ones((2, 3)))
    assert p.shape == (2, 3)
