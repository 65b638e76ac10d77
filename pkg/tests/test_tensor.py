import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mintnet import tensor as T
from mintnet.errors import ShapeError


def test_conv_ones_window_counts():
    out = T.conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), bias=np.zeros(1), pad=1)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out, 4.0)


def test_conv_zero_weight_gives_bias():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 4, 5))
    out = T.conv2d(x, np.zeros((2, 3, 3, 3)), bias=np.array([1.5, -2.0]))
    np.testing.assert_array_equal(out[:, 0], 1.5)
    np.testing.assert_array_equal(out[:, 1], -2.0)


def _explicit_conv(x, w):
    # direct nested-loop cross-correlation with zero padding
    n, c, h, wd = x.shape
    co, _, r, _ = w.shape
    p = r // 2
    out = np.zeros((n, co, h, wd))
    for b in range(n):
        for o in range(co):
            for y in range(h):
                for xx in range(wd):
                    s = 0.0
                    for i in range(c):
                        for m in range(r):
                            for q in range(r):
                                yy, xq = y + m - p, xx + q - p
                                if 0 <= yy < h and 0 <= xq < wd:
                                    s += w[o, i, m, q] * x[b, i, yy, xq]
                    out[b, o, y, xx] = s
    return out


@pytest.mark.parametrize("shape,co,r", [((1, 2, 4, 4), 2, 3), ((2, 1, 3, 5), 3, 3), ((1, 2, 4, 4), 2, 1), ((1, 3, 4, 3), 2, 5)])
def test_conv_matches_loops_and_dense_operator(shape, co, r):
    rng = np.random.default_rng(1)
    x = rng.normal(size=shape)
    w = rng.normal(size=(co, shape[1], r, r))
    out = T.conv2d(x, w)
    np.testing.assert_allclose(out, _explicit_conv(x, w), atol=1e-12)
    if co == shape[1]:
        A = T.dense_conv_operator(w, shape[2], shape[3])
        for b in range(shape[0]):
            np.testing.assert_allclose(A @ x[b].reshape(-1), out[b].reshape(-1), atol=1e-12)


def test_conv_adjoints():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 5, 4))
    w = rng.normal(size=(4, 3, 3, 3))
    g = rng.normal(size=(2, 4, 5, 4))
    lhs = np.sum(T.conv2d(x, w) * g)
    np.testing.assert_allclose(np.sum(x * T.conv2d_grad_input(g, w)), lhs, rtol=1e-12)
    np.testing.assert_allclose(np.sum(w * T.conv2d_grad_weight(x, g, 3)), lhs, rtol=1e-12)


def test_conv_shape_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\)"):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        T.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 2, 2)))
    with pytest.raises(ShapeError):
        T.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)))


def test_elementwise_helpers():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 1, 2, 2))
    np.testing.assert_array_equal(T.mul(x, np.ones_like(x)), x)
    assert T.reduce_sum(np.ones((2, 1, 2, 2))) == 8.0
    elu = lambda v: np.where(v > 0, v, np.expm1(v))
    np.testing.assert_allclose(T.elementwise(np.array([-1.0]), elu), [np.exp(-1) - 1], rtol=1e-12)
    with pytest.raises(ShapeError):
        T.add(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 3)))


def test_normalized_l2_is_per_example():
    a = np.zeros((2, 1, 2, 2))
    b = np.zeros((2, 1, 2, 2))
    b[1] = 2.0
    np.testing.assert_array_equal(T.normalized_l2(a, b), [0.0, 4.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 5), st.integers(2, 5), st.sampled_from([1, 3]))
def test_conv_is_linear(c, co, h, w, r):
    rng = np.random.default_rng(c * 100 + h * 10 + w)
    x1, x2 = rng.normal(size=(2, 1, c, h, w))
    k = rng.normal(size=(co, c, r, r))
    np.testing.assert_allclose(T.conv2d(x1 + 2 * x2, k), T.conv2d(x1, k) + 2 * T.conv2d(x2, k), atol=1e-11)
