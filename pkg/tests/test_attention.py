import numpy as np
import pytest

from lac import oracles
from lac.attention import (AttentionParams, causal_mask, cross_mha, linear_att, masked_mhsa, mhlsa,
                           mhlsa_flops, mhsa, mhsa_flops)
from lac.core import ops
from lac.core.gradcheck import check_loss, check_op
from lac.core.tensor import ShapeError, Tensor, no_grad, track_workspace

T = Tensor


def _arrs(ts):
    return [t.data for t in ts]


def _v_path(x, p):
    """Concatenated value projections through W^O: attention output when the only key has weight 1."""
    return ops.matmul(ops.concat_cols([ops.matmul(x, w) for w in p.wv]), p.wo).data


def _ulps(a, b):
    return np.abs(a - b).max() / (np.abs(b).max() * np.finfo(float).eps)


@pytest.fixture
def params(rng):
    return AttentionParams.init(rng, 8, 2)


def test_params_validate_head_width(rng):
    p = AttentionParams.init(rng, 8, 2)
    assert (p.heads, p.d_model, p.d_k) == (2, 8, 4)
    with pytest.raises(ShapeError):
        AttentionParams(p.wq, p.wk, p.wv[:1], p.wo)
    with pytest.raises((ShapeError, ValueError)):
        AttentionParams.init(rng, 10, 4)


# -- dot-product attention ---------------------------------------------------

def test_mhsa_matches_scalar_loop(rng, params):
    x = rng.standard_normal((8, 8))
    ref = oracles.dot_attention_loop(x, _arrs(params.wq), _arrs(params.wk), _arrs(params.wv), params.wo.data)
    got = mhsa(T(x), params).data
    assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-12


def test_mhsa_t1_is_value_projection(rng, params):
    x = T(rng.standard_normal((1, 8)))
    assert np.array_equal(mhsa(x, params).data, _v_path(x, params))


def test_mhsa_zero_query_is_uniform(rng):
    p = AttentionParams.init(rng, 8, 2)
    p = AttentionParams([T(np.zeros((8, 4)))] * 2, p.wk, p.wv, p.wo)
    x = T(rng.standard_normal((5, 8)))
    got = mhsa(x, p).data
    means = np.concatenate([(x.data @ w.data).mean(axis=0) for w in p.wv]) @ p.wo.data
    assert np.allclose(got, np.tile(means, (5, 1)), rtol=0, atol=1e-14)


def test_masked_mhsa_matches_loop_and_row0(rng, params):
    x = rng.standard_normal((6, 8))
    ref = oracles.dot_attention_loop(x, _arrs(params.wq), _arrs(params.wk), _arrs(params.wv),
                                     params.wo.data, causal_mask(6))
    got = masked_mhsa(T(x), params).data
    assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-12
    assert np.array_equal(got[0], mhsa(T(x[:1]), params).data[0])


def test_masked_mhsa_is_causal(rng, params):
    x = rng.standard_normal((7, 8))
    base = masked_mhsa(T(x), params).data
    for t in range(6):
        bumped = x.copy()
        bumped[t + 1:] += rng.standard_normal(bumped[t + 1:].shape)
        assert np.array_equal(masked_mhsa(T(bumped), params).data[: t + 1], base[: t + 1])


def test_causal_mask_shape():
    m = causal_mask(4)
    assert m.dtype == bool and np.array_equal(m, np.tril(np.ones((4, 4), bool)))


def test_cross_single_key(rng, params):
    q = T(rng.standard_normal((5, 8)))
    kv = T(rng.standard_normal((1, 8)))
    got = cross_mha(q, kv, params).data
    want = _v_path(kv, params)[0]
    assert np.array_equal(got, np.tile(want, (5, 1)))


def test_cross_empty_memory_rejected(rng, params):
    with pytest.raises((ShapeError, ValueError)):
        cross_mha(T(rng.standard_normal((3, 8))), T(np.zeros((0, 8)).reshape(0, 8)), params)


def test_mask_shape_mismatch(rng, params):
    with pytest.raises(ShapeError):
        mhsa(T(rng.standard_normal((4, 8))), params, mask=np.ones((3, 3), bool))


def test_padding_mask_on_keys(rng, params):
    x = rng.standard_normal((6, 8))
    keep = np.array([1, 1, 1, 1, 0, 0], bool)
    got = mhsa(T(x), params, mask=keep).data
    visible = np.tile(keep, (6, 1))
    ref = oracles.dot_attention_loop(x, _arrs(params.wq), _arrs(params.wk), _arrs(params.wv),
                                     params.wo.data, visible)
    assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-12


# -- linear attention --------------------------------------------------------------

def test_linear_att_t1_returns_v(rng):
    q, k, v = (rng.standard_normal((1, 5)) for _ in range(3))
    got = linear_att(T(q), T(k), T(v)).data
    assert _ulps(got, v) <= 4


def test_linear_att_reordering_64x16(rng):
    q, k, v = (rng.standard_normal((64, 16)) for _ in range(3))
    explicit, _ = oracles.linear_attention_explicit(q, k, v)
    got = linear_att(T(q), T(k), T(v)).data
    assert np.abs(got - explicit).max() / np.abs(explicit).max() < 1e-10


def test_linear_att_constant_values(rng):
    q, k = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))
    c = rng.standard_normal(4)
    got = linear_att(T(q), T(k), T(np.tile(c, (9, 1)))).data
    assert np.abs(got - c).max() < 1e-14


def test_linear_att_matches_oracle_formula(rng):
    # independent re-derivation: scale both by d_k^-1/4 before their softmaxes
    q, k, v = (rng.standard_normal((7, 9)) for _ in range(3))
    c = 9 ** -0.25
    a = np.exp(q * c) / np.exp(q * c).sum(axis=1, keepdims=True)
    b = np.exp(k * c) / np.exp(k * c).sum(axis=0, keepdims=True)
    assert np.abs(linear_att(T(q), T(k), T(v)).data - a @ (b.T @ v)).max() < 1e-13


def test_implicit_rows_stochastic(rng):
    for _ in range(20):
        t, d = rng.integers(1, 200), rng.integers(1, 40)
        _, implicit = oracles.linear_attention_explicit(*(rng.standard_normal((t, d)) for _ in range(3)))
        assert np.abs(implicit.sum(axis=1) - 1).max() < 1e-10


def test_linear_att_pad_mask(rng):
    q, k, v = (rng.standard_normal((6, 4)) for _ in range(3))
    keep = np.array([1, 1, 1, 1, 0, 0], bool)
    got = linear_att(T(q), T(k), T(v), keep).data
    c = 4 ** -0.25
    a = np.exp(q * c) / np.exp(q * c).sum(axis=1, keepdims=True)
    kk = np.exp(k[:4] * c) / np.exp(k[:4] * c).sum(axis=0, keepdims=True)
    assert np.abs(got - a @ (kk.T @ v[:4])).max() < 1e-13


def test_linear_att_shape_error(rng):
    with pytest.raises(ShapeError):
        linear_att(T(np.zeros((3, 2))), T(np.zeros((3, 4))), T(np.zeros((3, 2))))


# -- MHLSA ------------------------------------------------------------------------

def test_mhlsa_t1_equals_mhsa_t1(rng, params):
    x = T(rng.standard_normal((1, 8)))
    assert _ulps(mhlsa(x, params).data, mhsa(x, params).data) <= 8


def test_mhlsa_permutation_covariance(rng, params):
    x = rng.standard_normal((10, 8))
    perm = rng.permutation(10)
    a = mhlsa(T(x), params).data[perm]
    b = mhlsa(T(x[perm]), params).data
    assert np.abs(a - b).max() < 1e-13


def test_mhlsa_pad_rows_zeroed(rng, params):
    keep = np.array([1, 1, 1, 0], bool)
    x = rng.standard_normal((4, 8))
    out = mhlsa(T(x), params, keep).data
    assert np.array_equal(out[3], np.zeros(8))
    # padded frame content has no influence on valid rows
    x2 = x.copy()
    x2[3] += 5
    assert np.array_equal(mhlsa(T(x2), params, keep).data[:3], out[:3])


def _workspace(fn, t, d=16, h=2, seed=0):
    rng = np.random.default_rng(seed)
    p = AttentionParams.init(rng, d, h)
    x = T(rng.standard_normal((t, d)))
    with no_grad(), track_workspace() as ws:
        fn(x, p)
    return ws


def test_mhlsa_never_allocates_t_by_t():
    for t in (64, 256, 1024):
        ws = _workspace(mhlsa, t)
        assert ws.largest < t * t
        assert ws.largest <= t * 16


def test_mhlsa_workspace_linear_mhsa_quadratic():
    lengths = [32, 64, 128, 256, 512]
    lin = [_workspace(mhlsa, t).peak for t in lengths]
    quad = [_workspace(mhsa, t).peak for t in lengths]
    assert all(b / a <= 2.5 for a, b in zip(lin, lin[1:]))
    assert quad[-1] / quad[-2] >= 3
    assert _workspace(mhsa, 256).largest >= 256 * 256


@pytest.mark.parametrize("fn", [mhlsa, mhsa, masked_mhsa])
def test_attention_gradients(fn, rng):
    p = AttentionParams.init(rng, 8, 2)
    x = T(rng.standard_normal((6, 8)))
    proj = T(rng.standard_normal((6, 8)))
    res = check_loss(lambda: ops.sum_all(ops.mul(fn(x, p), proj)), [x, *p.tensors()])
    assert res.max_rel_err < 1e-5


def test_cross_gradient(rng, params):
    res = check_op(lambda a, b: cross_mha(a, b, params),
                   [T(rng.standard_normal((3, 8))), T(rng.standard_normal((5, 8)))])
    assert res.max_rel_err < 1e-5


def test_linear_att_gradient_masked(rng):
    keep = np.array([1, 0, 1, 1, 0], bool)
    res = check_op(lambda q, k, v: linear_att(q, k, v, keep),
                   [T(rng.standard_normal((5, 3))) for _ in range(3)])
    assert res.max_rel_err < 1e-5


# -- analytic flops -------------------------------------------------------------------

def test_flop_formulas_by_hand():
    t, d, h = 512, 256, 4
    dk = d // h
    per_lin = 3 * t * d * dk + 2 * t * dk + 2 * t * dk + 2 * t * dk * dk
    per_dot = 3 * t * d * dk + t * dk + t * t * dk + t * t + t * t * dk
    assert mhlsa_flops(t, d, h) == h * per_lin + t * d * d
    assert mhsa_flops(t, d, h) == h * per_dot + t * d * d


def test_flops_scaling():
    for t in (256, 1024, 4096):
        assert mhlsa_flops(2 * t, 256, 4) == 2 * mhlsa_flops(t, 256, 4)
        # f = a t^2 + b t  =>  f(4t) - 2 f(2t) == 4 (f(2t) - 2 f(t)): the quadratic part quadruples
        f = lambda n: mhsa_flops(n, 256, 4)  # noqa: E731
        assert f(4 * t) - 2 * f(2 * t) == 4 * (f(2 * t) - 2 * f(t))
        assert f(2 * t) - 2 * f(t) > 0
    assert mhsa_flops(2 ** 16, 256, 4) / mhsa_flops(2 ** 15, 256, 4) > 3.9
