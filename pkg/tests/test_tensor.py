import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from gbe import tensor as T
from gbe.errors import ConfigError, DimensionError, UsageError
from gbe.optim import AdamState, adam_step
from gbe.tensor import Tensor


def t64(a, grad=True):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


def grad_of(fn, x):
    """Analytic gradient of scalar ``fn(Tensor)`` at float64 array ``x``."""
    xt = t64(x)
    T.backward(fn(xt))
    return xt.grad


def value_of(fn):
    return lambda arr: float(fn(Tensor(arr)).data)


def projected(op, probe):
    return lambda x: T.tsum(op(x) * Tensor(probe))


# --- matmul -----------------------------------------------------------------


def test_matmul_identity():
    b = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_projector():
    out = T.matmul(Tensor([[1.0, 0], [0, 0]]), Tensor([[5.0, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    probe = rng.standard_normal((4, 2))
    ga = grad_of(lambda x: T.tsum(T.matmul(x, Tensor(b)) * Tensor(probe)), a)
    gb = grad_of(lambda x: T.tsum(T.matmul(Tensor(a), x) * Tensor(probe)), b)
    na = oracles.fd_grad(lambda x: float(np.sum((x @ b) * probe)), a)
    nb = oracles.fd_grad(lambda x: float(np.sum((a @ x) * probe)), b)
    assert oracles.rel_err(ga, na) < 1e-3
    assert oracles.rel_err(gb, nb) < 1e-3


# --- conv2d -------------------------------------------------------------------


def _conv_ref(x, w, stride, pad):
    c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                out[o, i, j] = np.sum(xp[:, i * stride:i * stride + k, j * stride:j * stride + k] * w[o])
    return out


def test_conv2d_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_sum_kernel():
    out = T.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, [[[4.0]]])


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2), (1, 0, 1)])
def test_conv2d_matches_loop_reference(stride, pad, k):
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((2, 6, 6)), rng.standard_normal((3, 2, k, k))
    out = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
    np.testing.assert_allclose(out.data, _conv_ref(x, w, stride, pad), rtol=1e-10, atol=1e-12)


def test_conv2d_batched_equals_per_sample():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((3, 2, 5, 5)), rng.standard_normal((4, 2, 3, 3))
    batched = T.conv2d(Tensor(x), Tensor(w), pad=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], T.conv2d(Tensor(x[i]), Tensor(w), pad=1).data)


def test_conv2d_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    probe = rng.standard_normal((3, 3, 3))
    gx = grad_of(lambda v: T.tsum(T.conv2d(v, Tensor(w)) * Tensor(probe)), x)
    gw = grad_of(lambda v: T.tsum(T.conv2d(Tensor(x), v) * Tensor(probe)), w)
    nx = oracles.fd_grad(lambda v: float(np.sum(_conv_ref(v, w, 1, 0) * probe)), x)
    nw = oracles.fd_grad(lambda v: float(np.sum(_conv_ref(x, v, 1, 0) * probe)), w)
    assert oracles.rel_err(gx, nx) < 1e-3
    assert oracles.rel_err(gw, nw) < 1e-3


def test_conv2d_non_integral_output_is_config_error():
    with pytest.raises(ConfigError):
        T.conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))), stride=2)


# --- softmax ------------------------------------------------------------------


def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0, 0]])).data, [[1 / 3] * 3], atol=1e-7)


def test_softmax_shift_ln2():
    x = 0.7
    np.testing.assert_allclose(T.softmax_rows(Tensor([[x, x + math.log(2)]])).data, [[1 / 3, 2 / 3]], atol=1e-7)


def test_softmax_jvp_matches_finite_differences():
    rng = np.random.default_rng(4)
    x, probe = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))

    def ref(v):
        e = np.exp(v - v.max(axis=1, keepdims=True))
        return float(np.sum(e / e.sum(axis=1, keepdims=True) * probe))

    g = grad_of(projected(T.softmax_rows, probe), x)
    assert oracles.rel_err(g, oracles.fd_grad(ref, x)) < 1e-3


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-50, 50))


@given(finite_rows, st.floats(-100, 100))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_stochastic_and_shift_invariant(x, c):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, y, atol=1e-6)


def test_softmax_large_inputs_stay_finite():
    y = T.softmax_rows(Tensor(np.array([[1e4, 0.0], [-1e4, 1e4]], dtype=np.float32))).data
    assert np.all(np.isfinite(y))


# --- leaky_relu -----------------------------------------------------------------


def test_leaky_relu_branches():
    assert T.leaky_relu(Tensor([5.0])).data[0] == 5.0
    np.testing.assert_allclose(T.leaky_relu(Tensor([-2.0]), 0.01).data, [-0.02])


def test_leaky_relu_derivative_at_zero_is_one():
    x = t64([0.0])
    T.backward(T.tsum(T.leaky_relu(x, 0.2)))
    assert x.grad[0] == 1.0


def test_leaky_relu_gradient_away_from_zero():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 5))
    x[np.abs(x) < 0.01] = 0.5
    probe = rng.standard_normal(x.shape)
    g = grad_of(projected(lambda v: T.leaky_relu(v, 0.01), probe), x)
    n = oracles.fd_grad(lambda v: float(np.sum(np.where(v >= 0, v, 0.01 * v) * probe)), x)
    assert oracles.rel_err(g, n) < 1e-3


@pytest.mark.parametrize("slope", [0.0, 1.0, -0.1])
def test_leaky_relu_rejects_bad_slope(slope):
    with pytest.raises(ConfigError):
        T.leaky_relu(Tensor([1.0]), slope)


# --- pooling -----------------------------------------------------------------------


def test_global_pools():
    x = Tensor(np.array([[[1.0, 2], [3, 4]]]))
    assert T.spatial_pool(x, "max").data[0] == 4.0
    assert T.spatial_pool(x, "avg").data[0] == 2.5


def test_max_pool_gradient_is_one_hot_per_window():
    rng = np.random.default_rng(6)
    x = rng.permutation(48).reshape(3, 4, 4).astype(np.float64)
    probe = rng.standard_normal((3, 2, 2))
    g = grad_of(projected(lambda v: T.spatial_pool(v, "max", 2), probe), x)
    windows = g.reshape(3, 2, 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(3, 2, 2, 4)
    assert np.all((windows != 0).sum(axis=-1) == 1)

    def ref(v):
        return float(np.sum(v.reshape(3, 2, 2, 2, 2).max(axis=(2, 4)) * probe))

    assert oracles.rel_err(g, oracles.fd_grad(ref, x)) < 1e-3


def test_max_pool_ties_go_to_first_row_major_index():
    x = t64(np.ones((1, 2, 2)))
    T.backward(T.tsum(T.spatial_pool(x, "max", 2)))
    np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])


def test_avg_pool_distributes_uniformly():
    x = t64(np.arange(16.0).reshape(1, 4, 4))
    T.backward(T.tsum(T.spatial_pool(x, "avg", 2)))
    np.testing.assert_allclose(x.grad, 0.25)


def test_pool_window_must_divide():
    with pytest.raises(ConfigError):
        T.spatial_pool(Tensor(np.zeros((1, 5, 5))), "max", 2)


# --- concat -----------------------------------------------------------------------


def test_concat_channels_and_slices():
    a, b = np.ones((1, 2, 2)), 2 * np.ones((1, 2, 2))
    out = T.concat_channels([Tensor(a), Tensor(b)])
    assert out.shape == (2, 2, 2)
    np.testing.assert_array_equal(out.data[:1], a)
    np.testing.assert_array_equal(out.data[1:], b)


def test_concat_single_part_is_identity():
    a = np.random.default_rng(0).standard_normal((3, 2, 2))
    np.testing.assert_array_equal(T.concat_channels([Tensor(a)]).data, a)


@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_split_concat_round_trip(channels, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.standard_normal((c, 3, 2)) for c in channels]
    out = T.concat_channels([Tensor(p) for p in parts])
    cuts = np.cumsum(channels)[:-1]
    for got, want in zip(np.split(out.data, cuts, axis=0), parts):
        np.testing.assert_array_equal(got, want.astype(got.dtype))


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        T.concat_channels([Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 2)))])


def test_concat_backward_slices_gradient():
    a, b = t64(np.zeros((1, 2, 2))), t64(np.zeros((2, 2, 2)))
    probe = np.arange(12.0).reshape(3, 2, 2)
    T.backward(T.tsum(T.concat_channels([a, b]) * Tensor(probe)))
    np.testing.assert_array_equal(a.grad, probe[:1])
    np.testing.assert_array_equal(b.grad, probe[1:])


# --- variance ---------------------------------------------------------------------


def test_variance_values():
    assert T.variance(Tensor([3.0, 3.0, 3.0])).data == 0.0
    assert T.variance(Tensor([0.0, 1.0])).data == pytest.approx(0.25)


def test_variance_gradient():
    x = np.random.default_rng(7).standard_normal(7)
    g = grad_of(lambda v: T.variance(v), x)
    assert oracles.rel_err(g, oracles.fd_grad(lambda v: float(np.var(v)), x)) < 1e-3


# --- backward -----------------------------------------------------------------------


def test_backward_of_sum_is_ones():
    x = t64(np.arange(6.0).reshape(2, 3))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_of_square_is_2x():
    xv = np.array([1.0, -2.0, 3.5])
    x = t64(xv)
    T.backward(T.tsum(x * x))
    np.testing.assert_allclose(x.grad, 2 * xv)


def test_backward_composite_pipeline():
    rng = np.random.default_rng(8)
    x, w, m = rng.standard_normal((2, 4, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal((12, 2))

    def build(xt, wt, mt):
        pooled = T.spatial_pool(T.conv2d(xt, wt, pad=1), "avg", 2)
        return T.tsum(T.matmul(T.reshape(pooled, (1, 12)), mt))

    def ref(xv, wv, mv):
        c = _conv_ref(xv, wv, 1, 1)
        return float(np.sum(c.reshape(3, 2, 2, 2, 2).mean(axis=(2, 4)).reshape(1, 12) @ mv))

    xt, wt, mt = t64(x), t64(w), t64(m)
    T.backward(build(xt, wt, mt))
    assert oracles.rel_err(xt.grad, oracles.fd_grad(lambda v: ref(v, w, m), x)) < 1e-3
    assert oracles.rel_err(wt.grad, oracles.fd_grad(lambda v: ref(x, v, m), w)) < 1e-3
    assert oracles.rel_err(mt.grad, oracles.fd_grad(lambda v: ref(x, w, v), m)) < 1e-3


def test_backward_non_scalar_is_usage_error():
    with pytest.raises(UsageError):
        T.backward(t64(np.ones(3)) * 2.0)


def test_tape_records_in_topological_order_and_zeroes_unreachable():
    a, b, unused = t64([1.0, 2.0]), t64([3.0, 4.0]), t64([5.0])
    with T.Tape() as tape:
        c = a * b
        _ = unused * 2.0
        loss = T.tsum(c + a)
    positions = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            if id(p) in positions:
                assert positions[id(p)] < positions[id(node)]
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, [4.0, 5.0])
    np.testing.assert_allclose(b.grad, [1.0, 2.0])
    np.testing.assert_array_equal(unused.grad, [0.0])


def test_loss_not_on_tape_is_usage_error():
    x = t64([1.0])
    loss = T.tsum(x * 2.0)
    with T.Tape() as tape:
        pass
    with pytest.raises(UsageError):
        tape.backward(loss)


def test_debug_mode_flags_non_finite_output():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            with np.errstate(divide="ignore"):
                Tensor([1.0]) / Tensor([0.0])
    finally:
        T.set_debug(False)


def test_float32_is_default_storage():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert (Tensor([1.0]) * 2.0).dtype == np.float32


def test_same_ops_are_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        T.backward(T.tsum(T.softmax_rows(T.reshape(T.conv2d(x, w, pad=1), (8, 64)))))
        return x.grad.tobytes() + w.grad.tobytes()

    assert run() == run()


# --- adam ---------------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.zeros(2)
    adam_step([p], AdamState(lr=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_descends_on_square():
    w = Tensor(np.array([1.0]), requires_grad=True)
    T.backward(T.tsum(w * w))
    adam_step([w], AdamState(lr=0.1))
    assert w.data[0] < 1.0
    np.testing.assert_array_equal(w.grad, [0.0])


def test_adam_matches_scalar_reference_and_converges():
    scales = np.array([1.0, 3.0])

    def grad(w):
        return [2 * scales[i] * w[i] for i in range(2)]

    w = Tensor(np.array([1.0, -1.5]), requires_grad=True)
    state = AdamState(lr=0.05)
    for _ in range(200):
        T.backward(T.tsum(Tensor(scales) * w * w))
        adam_step([w], state)
    ref = oracles.adam_scalar(grad, [1.0, -1.5], 200, 0.05)
    np.testing.assert_allclose(w.data, ref, rtol=1e-9, atol=1e-12)
    assert np.linalg.norm(grad(list(w.data))) < 1e-3
    assert state.step == 200


def test_adam_weight_decay_is_decoupled():
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.zeros(1)
    adam_step([p], AdamState(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


def test_adam_missing_grad_is_usage_error():
    with pytest.raises(UsageError):
        adam_step([Tensor([1.0], requires_grad=True, name="w")], AdamState())
