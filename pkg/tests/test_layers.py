import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import naive_correlate
from sonarnet import layers as L
from sonarnet.gradcheck import gradient_check
from sonarnet.rng import Rng


# ------------------------------------------------------------------ convolution

@pytest.mark.parametrize("padding,pad", [("valid", 0), ("same", 1), ("same", 2)])
def test_conv_matches_direct_loops(padding, pad):
    r = Rng(3)
    k = 2 * pad + 1 if padding == "same" else 3
    x = r.normal(0, 1, (2, 3, 7, 6))
    w = r.normal(0, 1, (4, 3, k, k))
    b = r.normal(0, 1, 4)
    out, _ = L.conv2d_forward(x, w, b, padding)
    np.testing.assert_allclose(out, naive_correlate(x, w, b, pad), rtol=1e-12, atol=1e-12)


def test_conv_is_correlation_not_convolution():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 0] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    out, _ = L.conv2d_forward(x, w, np.zeros(1))
    assert out[0, 0, 0, 0] == w[0, 0, 0, 0]


def test_conv_backward_matches_loop_gradients():
    r = Rng(4)
    x = r.normal(0, 1, (2, 2, 5, 5))
    w = r.normal(0, 1, (3, 2, 3, 3))
    up = r.normal(0, 1, (2, 3, 3, 3))
    _, cache = L.conv2d_forward(x, w, np.zeros(3))
    gx, gw, gb = L.conv2d_backward(cache, up)
    ref_gw = np.zeros_like(w)
    ref_gx = np.zeros_like(x)
    for n in range(2):
        for f in range(3):
            for i in range(3):
                for j in range(3):
                    ref_gw[f] += up[n, f, i, j] * x[n, :, i:i + 3, j:j + 3]
                    ref_gx[n, :, i:i + 3, j:j + 3] += up[n, f, i, j] * w[f]
    np.testing.assert_allclose(gw, ref_gw, atol=1e-12)
    np.testing.assert_allclose(gx, ref_gx, atol=1e-12)
    np.testing.assert_allclose(gb, up.sum(axis=(0, 2, 3)), atol=1e-12)


def test_conv_backward_can_skip_input_gradient():
    r = Rng(5)
    x, w = r.normal(0, 1, (1, 1, 4, 4)), r.normal(0, 1, (2, 1, 3, 3))
    _, cache = L.conv2d_forward(x, w, np.zeros(2))
    gx, gw, _ = L.conv2d_backward(cache, np.ones((1, 2, 2, 2)), input_grad=False)
    assert gx is None and gw.shape == w.shape


def test_conv_rejects_mismatched_channels_and_oversized_kernel():
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(L.ShapeError):
        L.conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


def test_conv_chunking_does_not_change_result(monkeypatch):
    r = Rng(6)
    x, w, b = r.normal(0, 1, (9, 2, 8, 8)), r.normal(0, 1, (3, 2, 3, 3)), r.normal(0, 1, 3)
    full, _ = L.conv2d_forward(x, w, b)
    monkeypatch.setattr(L, "_COL_BUDGET", 50)
    chunked, _ = L.conv2d_forward(x, w, b)
    np.testing.assert_array_equal(full, chunked)


# ---------------------------------------------------------------------- pooling

def test_maxpool_floor_mode_and_values():
    x = np.arange(25.0).reshape(1, 1, 5, 5)
    out, _ = L.maxpool2x2_forward(x)
    np.testing.assert_array_equal(out[0, 0], [[6, 8], [16, 18]])


def test_maxpool_tie_routes_gradient_to_first_max():
    x = np.ones((1, 1, 2, 2))
    _, cache = L.maxpool2x2_forward(x)
    g = L.maxpool2x2_backward(cache, np.array([[[[3.0]]]]))
    np.testing.assert_array_equal(g[0, 0], [[3, 0], [0, 0]])


def test_maxpool_dropped_edge_gets_zero_gradient():
    x = Rng(1).normal(0, 1, (1, 1, 5, 5))
    _, cache = L.maxpool2x2_forward(x)
    g = L.maxpool2x2_backward(cache, np.ones((1, 1, 2, 2)))
    assert np.all(g[0, 0, 4, :] == 0) and np.all(g[0, 0, :, 4] == 0)
    assert g.sum() == 4


def test_global_avgpool():
    x = Rng(2).normal(0, 1, (2, 3, 4, 5))
    out, cache = L.global_avgpool_forward(x)
    np.testing.assert_allclose(out, x.mean(axis=(2, 3)))
    g = L.global_avgpool_backward(cache, np.ones((2, 3)))
    np.testing.assert_allclose(g, 1 / 20)


# ------------------------------------------------------------------- dense/relu

def test_dense_flattens_and_restores_shape():
    r = Rng(3)
    x = r.normal(0, 1, (2, 3, 2, 2))
    w = r.normal(0, 1, (5, 12))
    out, cache = L.dense_forward(x, w, np.zeros(5))
    np.testing.assert_allclose(out, x.reshape(2, -1) @ w.T)
    gx, gw, gb = L.dense_backward(cache, np.ones((2, 5)))
    assert gx.shape == x.shape and gw.shape == w.shape and gb.shape == (5,)


def test_relu_gradient_zero_at_zero():
    out, cache = L.relu(np.array([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out, [0, 0, 2])
    np.testing.assert_array_equal(L.relu_backward(cache, np.ones(3)), [0, 0, 1])


def test_cache_is_single_use():
    _, cache = L.relu(np.ones(3))
    L.relu_backward(cache, np.ones(3))
    with pytest.raises(ValueError):
        L.relu_backward(cache, np.ones(3))


def test_backward_rejects_wrong_upstream_shape():
    _, cache = L.relu(np.ones(3))
    with pytest.raises(L.ShapeError):
        L.relu_backward(cache, np.ones(4))


def test_backward_rejects_cache_from_other_op():
    _, cache = L.relu(np.ones((1, 1, 2, 2)))
    with pytest.raises(L.ShapeError):
        L.maxpool2x2_backward(cache, np.ones((1, 1, 1, 1)))


# ---------------------------------------------------------------------- softmax

@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-1e3, 1e3))
def test_softmax_is_a_distribution_and_shift_invariant(row, shift):
    z = np.array([row])
    p = L.softmax(z)
    assert np.isclose(p.sum(), 1.0) and np.all(p >= 0)
    np.testing.assert_allclose(L.softmax(z + shift), p, atol=1e-12)


def test_softmax_huge_logits_are_finite():
    p = L.softmax(np.array([[1e308, 0.0, -1e308]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == 1.0


# -------------------------------------------------------------------- batchnorm

def test_batchnorm_train_normalizes_each_channel():
    x = Rng(7).normal(3.0, 2.0, (8, 3, 4, 4))
    out, _, _ = L.batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, rtol=1e-4)


def test_batchnorm_running_stats_update_and_no_mutation():
    x = Rng(8).normal(2.0, 3.0, (16, 2))
    rm, rv = np.zeros(2), np.ones(2)
    _, _, (nm, nv) = L.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv)
    np.testing.assert_allclose(nm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(nv, 0.9 + 0.1 * x.var(axis=0))
    np.testing.assert_array_equal(rm, 0)
    np.testing.assert_array_equal(rv, 1)


def test_batchnorm_infer_uses_running_stats():
    x = np.array([[1.0], [3.0]])
    out, _, stats = L.batchnorm_forward(x, np.array([2.0]), np.array([1.0]),
                                        np.array([1.0]), np.array([4.0]), L.INFER)
    np.testing.assert_allclose(out[:, 0], 2 * (x[:, 0] - 1) / np.sqrt(4 + 1e-5) + 1)
    np.testing.assert_array_equal(stats[0], [1.0])


def test_batchnorm_infer_backward_is_affine():
    r = Rng(9)
    x = r.normal(0, 1, (3, 2))
    args = [x, r.uniform(0.5, 2, 2), r.normal(0, 1, 2)]
    fwd = lambda a, g, b: L.batchnorm_forward(a, g, b, np.ones(2), np.full(2, 2.0), L.INFER)[:2]
    assert gradient_check(fwd, L.batchnorm_backward, args, rng=r).max_rel_error < 1e-7


def test_batchnorm_train_rejects_single_value_per_channel():
    with pytest.raises(L.ShapeError):
        L.batchnorm_forward(np.ones((1, 3)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3))


# ---------------------------------------------------------------------- dropout

def test_dropout_infer_is_identity():
    x = Rng(1).normal(0, 1, (4, 5))
    out, _ = L.dropout_forward(x, 0.5, L.INFER)
    np.testing.assert_array_equal(out, x)


def test_dropout_preserves_expectation():
    x = np.ones(200_000)
    out, _ = L.dropout_forward(x, 0.3, L.TRAIN, Rng(2))
    assert abs(out.mean() - 1.0) < 0.01
    assert abs((out == 0).mean() - 0.3) < 0.01
    np.testing.assert_allclose(out[out != 0], 1 / 0.7)


def test_dropout_backward_uses_same_mask():
    x = Rng(3).normal(0, 1, (6, 6))
    out, cache = L.dropout_forward(x, 0.5, L.TRAIN, Rng(4))
    g = L.dropout_backward(cache, np.ones_like(x))
    np.testing.assert_array_equal(g == 0, out == 0)


def test_dropout_validation():
    with pytest.raises(ValueError):
        L.dropout_forward(np.ones(3), 1.0, L.TRAIN, Rng(0))
    with pytest.raises(ValueError):
        L.dropout_forward(np.ones(3), 0.5, L.TRAIN)
    with pytest.raises(ValueError):
        L.dropout_forward(np.ones(3), 0.5, "eval", Rng(0))
