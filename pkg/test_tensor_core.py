#!/usr/bin/env python3
"""
Tests for the tensor core: forward values, error policy and gradients
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import tensor_core as tc
from tensor_core import CholeskyError, DomainError, Graph, NumericalError, ShapeError


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grad(build, *arrays, rtol=1e-4, atol=1e-7):
    """Compare reverse-mode gradients of a scalar build(*tensors) to central differences"""
    graph = Graph("check")
    leaves = [graph.leaf(a) for a in arrays]
    analytic = graph.gradient(build(*leaves), leaves)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [tc.constant(x) for x in arrays]
            args[i] = tc.constant(v)
            return build(*args).item()
        np.testing.assert_allclose(analytic[i], numeric_grad(f, np.array(a, dtype=float)), rtol=rtol, atol=atol)


def weighted(op, shape, seed=0):
    """Scalarize a tensor-valued op with fixed random weights"""
    W = np.random.default_rng(seed).normal(size=shape)
    return lambda *ts: tc.reduce_sum(op(*ts) * W)


def spd(n, seed=0):
    M = np.random.default_rng(seed).normal(size=(n, n))
    return M @ M.T + np.eye(n)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def test_elementwise_values():
    np.testing.assert_array_equal(tc.elementwise("add", [1, 2], [3, 4]).numpy(), [4, 6])
    np.testing.assert_array_equal(tc.elementwise("relu", [-1, 0, 2]).numpy(), [0, 0, 2])
    np.testing.assert_allclose(tc.sigmoid([0.0]).numpy(), [0.5])
    np.testing.assert_allclose(tc.normal_cdf([0.0]).numpy(), [0.5])


def test_exp_gradient_at_zero():
    graph = Graph()
    x = graph.leaf(0.0)
    (g,) = graph.gradient(tc.exp(x), [x])
    fd = (np.exp(1e-5) - np.exp(-1e-5)) / 2e-5
    assert abs(g - fd) / fd < 1e-7


@pytest.mark.parametrize("op", ["exp", "tanh", "sigmoid", "square", "neg", "relu"])
def test_unary_gradients(op):
    x = np.random.default_rng(1).normal(size=(3, 4))
    check_grad(weighted(lambda a: tc.elementwise(op, a), x.shape), x)


def test_log_sqrt_cdf_gradients():
    x = np.random.default_rng(2).uniform(0.5, 2.0, size=(5,))
    check_grad(weighted(tc.log, x.shape), x)
    check_grad(weighted(tc.sqrt, x.shape), x)
    check_grad(weighted(tc.normal_cdf, x.shape), x - 1.0)


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(op):
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 4))
    b = rng.uniform(0.5, 1.5, size=(4,))
    check_grad(weighted(lambda x, y: tc.elementwise(op, x, y), (3, 4)), a, b)


def test_domain_and_shape_errors():
    with pytest.raises(DomainError):
        tc.div([1.0], [0.0])
    with pytest.raises(DomainError):
        tc.log([-1.0])
    with pytest.raises(DomainError):
        tc.sqrt([-0.5])
    with pytest.raises(ShapeError):
        tc.add(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        tc.elementwise("pow", [1.0], [2.0])


def test_non_finite_forward_names_the_op():
    with pytest.raises(NumericalError) as info:
        tc.exp([1000.0])
    assert info.value.op == "exp"
    with pytest.raises(NumericalError):
        Graph().leaf([np.nan])


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def test_matmul_values_and_errors():
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(tc.matmul(np.eye(3), M).numpy(), M)
    np.testing.assert_array_equal(tc.matmul([[1, 2], [3, 4]], [[1], [1]]).numpy(), [[3], [7]])
    with pytest.raises(ShapeError):
        tc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    check_grad(weighted(tc.matmul, (4, 2)), a, b, rtol=1e-6)


def test_batched_matmul_gradient():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(2, 3, 3)), rng.normal(size=(1, 3, 4))
    check_grad(weighted(tc.matmul, (2, 3, 4)), a, b)


def test_cholesky_values():
    np.testing.assert_array_equal(tc.cholesky(np.eye(3)).numpy(), np.eye(3))
    np.testing.assert_array_equal(tc.cholesky([[4.0]]).numpy(), [[2.0]])
    A = spd(5)
    L = tc.cholesky(A).numpy()
    assert np.max(np.abs(L @ L.T - A)) < 1e-10
    assert np.allclose(L, np.tril(L))


def test_cholesky_gradient():
    A = spd(5, seed=6)
    sym = lambda X: tc.cholesky((X + X.T) * 0.5)
    check_grad(weighted(sym, (5, 5), seed=7), A, rtol=1e-5)


def test_cholesky_failure_reports_pivot():
    with pytest.raises(CholeskyError) as info:
        tc.cholesky([[1.0, 2.0], [2.0, 1.0]])
    assert info.value.pivot == 1
    with pytest.raises(ShapeError):
        tc.cholesky(np.ones((2, 3)))


def test_triangular_solve_values():
    b = np.array([[1.0], [2.0]])
    np.testing.assert_array_equal(tc.triangular_solve(np.eye(2), b).numpy(), b)
    x = tc.triangular_solve([[2.0, 0.0], [1.0, 1.0]], [[2.0], [3.0]]).numpy()
    np.testing.assert_allclose(x, [[1.0], [2.0]])
    rng = np.random.default_rng(8)
    L = np.tril(rng.normal(size=(6, 6))) + 4 * np.eye(6)
    B = rng.normal(size=(6, 3))
    assert np.max(np.abs(L @ tc.triangular_solve(L, B).numpy() - B)) < 1e-12
    assert np.max(np.abs(L.T @ tc.triangular_solve(L, B, transpose=True).numpy() - B)) < 1e-12


@pytest.mark.parametrize("transpose", [False, True])
def test_triangular_solve_gradient(transpose):
    rng = np.random.default_rng(9)
    L = np.tril(rng.normal(size=(4, 4))) + 3 * np.eye(4)
    B = rng.normal(size=(4, 2))
    solve = lambda l, b: tc.triangular_solve(l, b, lower=True, transpose=transpose)
    check_grad(weighted(solve, (4, 2)), L, B)


def test_triangular_solve_zero_diagonal():
    with pytest.raises(DomainError):
        tc.triangular_solve([[1.0, 0.0], [1.0, 0.0]], [[1.0], [1.0]])


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def test_reductions():
    assert tc.reduce("sum", [1.0, 2.0, 3.0]).item() == 6.0
    assert tc.reduce("prod", [2.0, 3.0, 4.0]).item() == 24.0
    with pytest.raises(ValueError):
        tc.reduce("median", [1.0])


def test_max_tie_goes_to_first_index():
    graph = Graph()
    x = graph.leaf([1.0, 3.0, 3.0])
    (g,) = graph.gradient(tc.reduce_max(x), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_mean_gradient():
    x = np.random.default_rng(10).normal(size=(4, 5))
    graph = Graph()
    xt = graph.leaf(x)
    (g,) = graph.gradient(tc.reduce_mean(xt), [xt])
    np.testing.assert_allclose(g, np.full(x.shape, 1 / 20))
    check_grad(weighted(lambda a: tc.reduce_mean(a, axis=1), (4,)), x)


def test_axis_reduction_gradients():
    x = np.random.default_rng(11).normal(size=(3, 4, 2))
    check_grad(weighted(lambda a: tc.reduce_sum(a, axis=1), (3, 2)), x)
    check_grad(weighted(lambda a: tc.reduce_max(a, axis=2, keepdims=True), (3, 4, 1)), x)
    check_grad(weighted(lambda a: tc.reduce_prod(a, axis=1), (3, 2)), x)


def test_prod_gradient_with_zero_entry():
    graph = Graph()
    x = graph.leaf([2.0, 0.0, 3.0])
    (g,) = graph.gradient(tc.reduce_prod(x, axis=0), [x])
    np.testing.assert_array_equal(g, [0.0, 6.0, 0.0])


def test_shape_op_gradients():
    x = np.random.default_rng(12).normal(size=(2, 3, 4))
    check_grad(weighted(lambda a: tc.transpose(a), (2, 4, 3)), x)
    check_grad(weighted(lambda a: tc.reshape(a, (6, 4)), (6, 4)), x)
    check_grad(weighted(lambda a: a[1, :, ::2], (3, 2)), x)
    check_grad(weighted(lambda a, b: tc.stack([a, b], axis=1), (2, 2, 3, 4)), x, x + 1.0)


# ---------------------------------------------------------------------------
# Image ops
# ---------------------------------------------------------------------------

def naive_conv(x, w, b, padding):
    B, H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "SAME":
        pt, pl = (kh - 1) // 2, (kw - 1) // 2
        xp = np.pad(x, ((0, 0), (pt, kh - 1 - pt), (pl, kw - 1 - pl), (0, 0)))
    else:
        xp = x
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    out = np.zeros((B, ho, wo, cout))
    for n in range(B):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    for di in range(kh):
                        for dj in range(kw):
                            out[n, i, j, o] += xp[n, i + di, j + dj, :] @ w[di, dj, :, o]
    return out + b


def test_conv2d_identity_and_ones():
    x = np.random.default_rng(13).normal(size=(2, 5, 5, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(tc.conv2d(x, w, np.zeros(3)).numpy(), x)
    out = tc.conv2d(np.ones((1, 5, 5, 1)), np.ones((3, 3, 1, 1)), np.zeros(1), "VALID").numpy()
    assert out.shape == (1, 3, 3, 1)
    np.testing.assert_array_equal(out, 9.0)


@pytest.mark.parametrize("padding,k", [("SAME", 3), ("SAME", 4), ("VALID", 3)])
def test_conv2d_matches_naive_loops(padding, k):
    rng = np.random.default_rng(14)
    x, w, b = rng.normal(size=(2, 6, 5, 2)), rng.normal(size=(k, k, 2, 3)), rng.normal(size=3)
    assert np.max(np.abs(tc.conv2d(x, w, b, padding).numpy() - naive_conv(x, w, b, padding))) < 1e-12


def test_conv2d_gradient_and_errors():
    rng = np.random.default_rng(15)
    x, w, b = rng.normal(size=(2, 4, 4, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    check_grad(weighted(lambda *a: tc.conv2d(*a, padding="SAME"), (2, 4, 4, 3)), x, w, b)
    with pytest.raises(ShapeError):
        tc.conv2d(x, rng.normal(size=(3, 3, 1, 3)), b)


def naive_pool(x, window=2, stride=2):
    B, H, W, C = x.shape
    ho, wo = -(-H // stride), -(-W // stride)
    out = np.full((B, ho, wo, C), -np.inf)
    for i in range(ho):
        for j in range(wo):
            block = x[:, i * stride:i * stride + window, j * stride:j * stride + window, :]
            out[:, i, j, :] = block.max(axis=(1, 2))
    return out


def test_maxpool_values():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert tc.maxpool2d(x).numpy().ravel().tolist() == [4.0]
    rng = np.random.default_rng(16)
    y = rng.normal(size=(2, 6, 6, 3))
    np.testing.assert_array_equal(tc.maxpool2d(y).numpy(), naive_pool(y))
    assert tc.maxpool2d(rng.normal(size=(1, 7, 7, 1))).shape == (1, 4, 4, 1)


def test_maxpool_constant_input_routes_to_first_element():
    graph = Graph()
    x = graph.leaf(np.ones((1, 2, 2, 1)))
    out = tc.maxpool2d(x)
    np.testing.assert_array_equal(out.numpy(), np.ones((1, 1, 1, 1)))
    (g,) = graph.gradient(tc.reduce_sum(out), [x])
    np.testing.assert_array_equal(g.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_gradient():
    x = np.random.default_rng(17).normal(size=(2, 5, 5, 2))
    check_grad(weighted(tc.maxpool2d, (2, 3, 3, 2)), x)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def test_backward_simple_losses():
    x = np.random.default_rng(18).normal(size=(3, 2))
    graph = Graph()
    xt = graph.leaf(x)
    grads = tc.backward(tc.reduce_sum(xt))
    np.testing.assert_array_equal(grads[xt.node], np.ones_like(x))

    graph = Graph()
    v = graph.leaf(x.ravel())
    (g,) = graph.gradient(tc.reduce_sum(tc.square(v)) * 0.5, [v])
    np.testing.assert_allclose(g, x.ravel())


def test_backward_needs_scalar_and_graph():
    graph = Graph()
    x = graph.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        graph.backward(x * 2.0)
    with pytest.raises(tc.TensorError):
        tc.backward(tc.constant(1.0))


def test_fan_out_accumulates_and_unused_leaves_get_zeros():
    graph = Graph()
    x = graph.leaf(2.0)
    unused = graph.leaf(np.ones(2))
    (gx, gu) = graph.gradient(x * x + x, [x, unused])
    assert gx == pytest.approx(5.0)
    np.testing.assert_array_equal(gu, np.zeros(2))


def test_constant_cuts_the_gradient_path():
    graph = Graph()
    x = graph.leaf(3.0)
    frozen = tc.constant(x * x)
    assert frozen.graph is None and frozen.item() == 9.0
    (g,) = graph.gradient(x * frozen + x, [x])
    assert g == pytest.approx(10.0)


def test_backward_is_deterministic():
    rng = np.random.default_rng(19)
    A, B = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))

    def run():
        graph = Graph()
        a, b = graph.leaf(A), graph.leaf(B)
        K = a @ a.T + 4.0 * np.eye(4)
        loss = tc.reduce_sum(tc.square(tc.triangular_solve(tc.cholesky(K), b)))
        return graph.gradient(loss, [a, b])

    first, second = run(), run()
    for g1, g2 in zip(first, second):
        assert np.array_equal(g1, g2)


def test_mixed_graphs_rejected():
    a, b = Graph().leaf(1.0), Graph().leaf(2.0)
    with pytest.raises(tc.TensorError):
        a + b


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
