import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lac import oracles
from lac.core import kernels, ops
from lac.core.gradcheck import check_loss, check_op
from lac.core.tensor import (NonFiniteError, ShapeError, Tape, TapeError, Tensor, no_grad,
                             track_workspace)

T = Tensor


# -- tensor value type ---------------------------------------------------------

def test_tensor_is_immutable_copy():
    src = np.ones((2, 3))
    t = T(src)
    src[0, 0] = 5.0
    assert t.data[0, 0] == 1.0
    with pytest.raises(ValueError):
        t.data[0, 0] = 2.0
    copy = t.numpy()
    copy[0, 0] = 7.0
    assert t.data[0, 0] == 1.0


def test_tensor_rank_limits():
    assert T(3.0).shape == (1,)
    with pytest.raises(ShapeError):
        T(np.zeros((1, 1, 1, 1, 1)))


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected(bad):
    with pytest.raises(NonFiniteError):
        T([1.0, bad])


def test_op_producing_non_finite_is_an_error():
    with pytest.raises((NonFiniteError, FloatingPointError)):
        with np.errstate(over="ignore"):
            ops.scale(T([1e308]), 10.0)


# -- matmul --------------------------------------------------------------------

@pytest.mark.parametrize("m,k,n", [(1, 1, 1), (3, 5, 2), (7, 13, 5), (9, 33, 17), (4, 600, 3), (5, 3, 700)])
def test_matmul_bit_identical_to_scalar_loop(m, k, n, rng):
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    got = kernels.matmul(a, b)
    assert np.array_equal(got, oracles.matmul_loop(a, b))


def test_matmul_parallel_matches_serial_bitwise(rng):
    a, b = rng.standard_normal((300, 70)), rng.standard_normal((70, 90))
    serial = kernels.matmul(a, b)
    kernels.set_num_threads(4)
    try:
        par = kernels.matmul(a, b)
    finally:
        kernels.set_num_threads(1)
    assert np.array_equal(serial, par)


def test_matmul_examples(rng):
    a = rng.standard_normal((2, 2))
    assert np.array_equal(ops.matmul(T(np.eye(2)), T(a)).data, a)
    assert ops.matmul(T([[2.0]]), T([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_associativity_8x8(rng):
    a, b, c = (T(rng.standard_normal((8, 8))) for _ in range(3))
    left = ops.matmul(ops.matmul(a, b), c).data
    right = ops.matmul(a, ops.matmul(b, c)).data
    assert np.abs(left - right).max() / np.abs(right).max() < 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.integers(1, 64),
       st.integers(0, 2 ** 32 - 1))
def test_matmul_associativity_property(m, k, n, p, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (T(rng.uniform(-1, 1, s)) for s in ((m, k), (k, n), (n, p)))
    left = ops.matmul(ops.matmul(a, b), c).data
    right = ops.matmul(a, ops.matmul(b, c)).data
    denom = np.abs(right).max()
    if denom > 0:
        assert np.abs(left - right).max() / denom < 1e-10


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(T(np.zeros((2, 3))), T(np.zeros((4, 5))))


def test_determinism(rng):
    a, b = rng.standard_normal((40, 30)), rng.standard_normal((30, 20))
    x = ops.softmax_rows(ops.matmul(T(a), T(b))).data
    y = ops.softmax_rows(ops.matmul(T(a), T(b))).data
    assert np.array_equal(x, y)


# -- softmax -------------------------------------------------------------------

def test_softmax_rows_examples():
    assert np.allclose(ops.softmax_rows(T(np.zeros((1, 4)))).data, 0.25, rtol=0, atol=1e-16)
    assert ops.softmax_rows(T([[1000.0, 1000.0]])).data.tolist() == [[0.5, 0.5]]
    got = ops.softmax_rows(T([[0.0, math.log(3.0)]])).data[0]
    assert np.allclose(got, [0.25, 0.75], rtol=0, atol=1e-15)


def test_softmax_cols_examples(rng):
    assert np.array_equal(ops.softmax_cols(T(rng.standard_normal((1, 5)))).data, np.ones((1, 5)))
    x = T(rng.standard_normal((6, 4)))
    via_t = ops.transpose(ops.softmax_rows(ops.transpose(x))).data
    assert np.abs(ops.softmax_cols(x).data - via_t).max() <= 1e-15
    got = ops.softmax_cols(T([[0.0], [0.0], [math.log(2.0)]])).data[:, 0]
    assert np.allclose(got, [0.25, 0.25, 0.5], rtol=0, atol=1e-15)


def test_softmax_sums(rng):
    x = T(rng.standard_normal((20, 30)) * 10)
    assert np.abs(ops.softmax_rows(x).data.sum(axis=1) - 1).max() < 1e-12
    assert np.abs(ops.softmax_cols(x).data.sum(axis=0) - 1).max() < 1e-12


def test_softmax_mask_errors():
    with pytest.raises(ShapeError):
        ops.softmax_rows(T(np.zeros((2, 3))), np.ones((3, 2), bool))
    with pytest.raises(ValueError):
        ops.softmax_rows(T(np.zeros((2, 3))), np.array([[True] * 3, [False] * 3]))


def test_log_softmax_rows_normalised(rng):
    lp = ops.log_softmax_rows(T(rng.standard_normal((5, 7)) * 30)).data
    assert np.abs(np.logaddexp.reduce(lp, axis=1)).max() < 1e-12


# -- norms -----------------------------------------------------------------------

def test_layernorm_examples(rng):
    one, zero = T(np.ones(4)), T(np.zeros(4))
    assert np.array_equal(ops.layernorm(T(np.full((2, 4), 3.7)), one, zero).data, np.zeros((2, 4)))
    got = ops.layernorm(T([[1.0, -1.0]]), T(np.ones(2)), T(np.zeros(2))).data
    assert np.allclose(got, np.array([[1.0, -1.0]]) * math.sqrt(1 / (1 + 1e-5)), rtol=0, atol=1e-15)
    x = T(rng.standard_normal((3, 4)))
    g, b = rng.standard_normal(4), rng.standard_normal(4)
    xhat = ops.layernorm(x, one, zero).data
    assert np.allclose(ops.layernorm(x, T(g), T(b)).data, g * xhat + b, rtol=0, atol=1e-14)


def test_batchnorm_infer_examples(rng):
    x = rng.standard_normal((5, 3))
    c = lambda v: T(np.full(3, float(v)))  # noqa: E731
    got = ops.batchnorm_infer(T(x), c(0), c(1), c(1), c(0)).data
    assert np.allclose(got, x / math.sqrt(1 + 1e-5), rtol=0, atol=1e-15)
    mean, bias = rng.standard_normal(3), rng.standard_normal(3)
    got = ops.batchnorm_infer(T(np.tile(mean, (4, 1))), T(mean), c(2), c(3), T(bias)).data
    assert np.array_equal(got, np.tile(bias, (4, 1)))
    one = ops.batchnorm_infer(T([[3.0]]), T([1.0]), T([4.0]), T([2.0]), T([0.0])).item()
    assert one == pytest.approx(2 * 2 / math.sqrt(4 + 1e-5), rel=1e-15)
    assert one == pytest.approx(2.0, abs=1e-5)


def test_batchnorm_negative_variance():
    with pytest.raises(ValueError):
        ops.batchnorm_infer(T([[1.0]]), T([0.0]), T([-1.0]), T([1.0]), T([0.0]))


# -- convolutions and activations -------------------------------------------------

def test_conv2d_examples(rng):
    assert ops.conv2d(T(np.ones((1, 3, 3))), T(np.ones((1, 1, 3, 3))), 1).data.tolist() == [[[9.0]]]
    assert ops.conv2d(T(np.zeros((2, 7, 7))), T(np.zeros((3, 2, 3, 3))), 2).shape == (3, 3, 3)
    x = rng.standard_normal((1, 6, 5))
    delta = np.zeros((1, 1, 3, 3))
    delta[0, 0, 1, 1] = 1.0
    assert np.array_equal(ops.conv2d(T(x), T(delta), 1).data[0], x[0, 1:-1, 1:-1])


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_vs_loop(stride, rng):
    x, k = rng.standard_normal((3, 9, 8)), rng.standard_normal((2, 3, 3, 3))
    got = ops.conv2d(T(x), T(k), stride).data
    assert np.abs(got - oracles.conv2d_loop(x, k, stride)).max() < 1e-13


def test_conv2d_errors():
    with pytest.raises(ShapeError):
        ops.conv2d(T(np.zeros((1, 2, 5))), T(np.zeros((1, 1, 3, 3))), 1)
    with pytest.raises(ValueError):
        ops.conv2d(T(np.zeros((1, 5, 5))), T(np.zeros((1, 1, 3, 3))), 3)


def test_activation_examples():
    assert ops.swish(T([0.0])).item() == 0.0
    a = np.array([[1.0, -2.0, 3.0]])
    got = ops.glu(T(np.concatenate([a, np.zeros((1, 3))], axis=1))).data
    assert np.array_equal(got, a * 0.5)
    got = ops.depthwise_conv1d(T([[0.0], [1.0], [0.0]]), T([[1.0, 1.0, 1.0]])).data
    assert got[:, 0].tolist() == [1.0, 1.0, 1.0]
    assert ops.relu(T([-1.0, 2.0])).data.tolist() == [0.0, 2.0]


def test_depthwise_vs_loop_and_even_kernel(rng):
    x, k = rng.standard_normal((10, 4)), rng.standard_normal((4, 5))
    assert np.abs(ops.depthwise_conv1d(T(x), T(k)).data - oracles.depthwise_loop(x, k)).max() < 1e-14
    with pytest.raises(ValueError):
        ops.depthwise_conv1d(T(x), T(rng.standard_normal((4, 4))))


def test_sigmoid_is_stable_for_large_inputs():
    s = ops.sigmoid(T([-800.0, 800.0])).data
    assert s.tolist() == [0.0, 1.0]


def test_dropout_modes(rng):
    x = T(np.ones((50, 40)))
    assert ops.dropout(x, 0.5, None) is x
    y = ops.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert ops.dropout(x, 0.25, np.random.default_rng(0)).data.tolist() == y.tolist()


# -- backward ----------------------------------------------------------------------

def test_grad_of_sum_is_ones(rng):
    x = T(rng.standard_normal((3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(x)
    g = tape.backward(loss)
    assert np.array_equal(g[x], np.ones((3, 4)))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_matmul_grad_4x4(rng):
    res = check_op(ops.matmul, [T(rng.standard_normal((4, 4))), T(rng.standard_normal((4, 4)))])
    assert res.max_rel_err < 1e-6


def test_softmax_grad_row_sums_zero_for_constant_upstream(rng):
    x = T(rng.standard_normal((4, 5)), requires_grad=True)
    w = T(np.repeat(rng.standard_normal((4, 1)), 5, axis=1))
    with Tape() as tape:
        loss = ops.sum_all(ops.mul(ops.softmax_rows(x), w))
    g = tape.backward(loss)[x]
    assert np.abs(g.sum(axis=1)).max() < 1e-15


def test_backward_reverse_order_and_single_use(rng):
    x = T(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.swish(x)
        z = ops.mul(y, y)
        loss = ops.sum_all(z)
    n = len(tape.nodes)
    assert [nd.op for nd in tape.nodes] == ["swish", "mul", "sum"]
    tape.backward(loss)
    assert tape.visited == list(range(n - 1, -1, -1))
    with pytest.raises(TapeError):
        tape.backward(loss)
    with pytest.raises(TapeError):
        with tape:
            pass


def test_backward_rejects_non_scalar(rng):
    x = T(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ops.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_no_grad_records_nothing(rng):
    x = T(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        with no_grad():
            ops.mul(x, x)
    assert tape.nodes == []


def test_gradient_accumulates_over_reuse(rng):
    x = T(rng.standard_normal((3,)), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(ops.add(ops.mul(x, x), x))
    g = tape.backward(loss)[x]
    assert np.allclose(g, 2 * x.data + 1, rtol=0, atol=1e-15)


# 100 randomised trials per op against central differences.
def _pos(rng, *s):
    return rng.uniform(0.5, 2.0, s)


OPS = {
    "matmul": (ops.matmul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "pointwise_conv": (ops.pointwise_conv, lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "transpose": (ops.transpose, lambda r: [r.standard_normal((3, 4))]),
    "reshape": (lambda x: ops.reshape(x, (2, 6)), lambda r: [r.standard_normal((3, 4))]),
    "permute": (lambda x: ops.permute(x, (2, 0, 1)), lambda r: [r.standard_normal((2, 3, 2))]),
    "concat_cols": (lambda a, b: ops.concat_cols([a, b]), lambda r: [r.standard_normal((3, 2)), r.standard_normal((3, 3))]),
    "take_rows": (lambda t: ops.take_rows(t, [2, 0, 2]), lambda r: [r.standard_normal((4, 3))]),
    "select": (lambda x: ops.select(x, [0, 1, 1], [2, 0, 0]), lambda r: [r.standard_normal((2, 3))]),
    "add": (ops.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "add_row": (ops.add, lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "sub": (ops.sub, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "mul": (ops.mul, lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
    "mul_row": (ops.mul, lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "scale": (lambda x: ops.scale(x, -1.7), lambda r: [r.standard_normal((3, 4))]),
    "add_const": (lambda x: ops.add_const(x, np.arange(12.0).reshape(3, 4)), lambda r: [r.standard_normal((3, 4))]),
    "mask_rows": (lambda x: ops.mask_rows(x, np.array([True, False, True])), lambda r: [r.standard_normal((3, 4))]),
    "mean_all": (ops.mean_all, lambda r: [r.standard_normal((3, 4))]),
    "sigmoid": (ops.sigmoid, lambda r: [r.standard_normal((3, 4)) * 3]),
    "swish": (ops.swish, lambda r: [r.standard_normal((3, 4)) * 3]),
    "relu": (ops.relu, lambda r: [r.uniform(0.05, 2, (3, 4)) * r.choice([-1, 1], (3, 4))]),
    "glu": (ops.glu, lambda r: [r.standard_normal((3, 6))]),
    "softmax_rows": (ops.softmax_rows, lambda r: [r.standard_normal((3, 5)) * 2]),
    "softmax_rows_masked": (lambda x: ops.softmax_rows(x, np.tril(np.ones((3, 3), bool))),
                            lambda r: [r.standard_normal((3, 3))]),
    "softmax_cols": (ops.softmax_cols, lambda r: [r.standard_normal((5, 3)) * 2]),
    "log_softmax_rows": (ops.log_softmax_rows, lambda r: [r.standard_normal((3, 5)) * 2]),
    "layernorm": (ops.layernorm, lambda r: [r.standard_normal((3, 5)), r.standard_normal(5), r.standard_normal(5)]),
    "batchnorm_infer": (ops.batchnorm_infer, lambda r: [r.standard_normal((4, 3)), r.standard_normal(3),
                                                        _pos(r, 3), r.standard_normal(3), r.standard_normal(3)]),
    "batchnorm_train": (ops.batchnorm_train, lambda r: [r.standard_normal((5, 3)), r.standard_normal(3),
                                                        r.standard_normal(3)]),
    "conv2d_s1": (lambda x, k: ops.conv2d(x, k, 1), lambda r: [r.standard_normal((2, 5, 4)), r.standard_normal((2, 2, 3, 3))]),
    "conv2d_s2": (lambda x, k: ops.conv2d(x, k, 2), lambda r: [r.standard_normal((2, 7, 5)), r.standard_normal((2, 2, 3, 3))]),
    "depthwise_conv1d": (ops.depthwise_conv1d, lambda r: [r.standard_normal((5, 3)), r.standard_normal((3, 3))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_100_trials(name):
    fn, make = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for trial in range(100):
        inputs = [T(a) for a in make(rng)]
        worst = max(worst, check_op(fn, inputs, seed=trial).max_rel_err)
    assert worst < 1e-5, f"{name}: {worst:.3e}"


# -- gradcheck helper ---------------------------------------------------------------

def test_gradcheck_detects_wrong_gradient(rng):
    def bad_square(x):
        return ops.emit("bad", x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2

    assert check_op(bad_square, [T(rng.standard_normal((3,)))]).max_rel_err > 0.1


def test_gradcheck_restores_parameters(rng):
    x = T(rng.standard_normal((3, 3)))
    before = x.numpy()
    check_loss(lambda: ops.sum_all(ops.mul(x, x)), [x])
    assert np.array_equal(x.data, before)
    assert not x.requires_grad


def test_central_difference_oracle():
    g = oracles.central_difference(lambda v: float((v ** 3).sum()), np.array([1.0, 2.0]))
    assert np.allclose(g, [3.0, 12.0], rtol=1e-9)


# -- workspace tracking ---------------------------------------------------------------

def test_workspace_counts_live_scalars(rng):
    with track_workspace() as ws:
        a = T(np.zeros((10, 10)))
        b = T(np.zeros((5,)))
        assert ws.live == 105
        del a
        assert ws.live == 5
        c = T(np.zeros((20,)))
    assert ws.peak == 105
    assert ws.largest == 100
    assert ws.allocations == 3
    del b, c


def test_workspace_nested_charges_innermost():
    with track_workspace() as outer:
        with track_workspace() as inner:
            t = T(np.zeros(7))
        assert inner.peak == 7 and outer.peak == 0
        del t
