#!/usr/bin/env python3
"""
Tests for the robustmax likelihood and its quadrature
"""

import os
import sys

import numpy as np
import pytest
from numpy.polynomial.hermite import hermgauss
from scipy.stats import norm

sys.path.insert(0, os.path.dirname(__file__))

import tensor_core as tc
from gp_layer import LatentMarginals
from robustmax import (
    RobustmaxParams,
    argmax_probs,
    gauss_hermite,
    get_quadrature,
    normalize_rows,
    predictive_probs,
    variational_expectation,
)
from tensor_core import Graph


def marginals(mean, var):
    return LatentMarginals(tc.constant(mean), tc.constant(var))


@pytest.mark.parametrize("H", [1, 2, 5, 20, 40])
def test_gauss_hermite_matches_reference(H):
    rule = gauss_hermite(H)
    ref_nodes, ref_weights = hermgauss(H)
    np.testing.assert_allclose(rule.nodes, ref_nodes, atol=1e-10)
    np.testing.assert_allclose(rule.weights, ref_weights, rtol=1e-8, atol=1e-13)
    assert rule.weights.sum() == pytest.approx(np.sqrt(np.pi), rel=1e-12)
    np.testing.assert_array_equal(rule.nodes, -rule.nodes[::-1])
    np.testing.assert_array_equal(rule.weights, rule.weights[::-1])


def test_gauss_hermite_integrates_polynomials():
    rule = get_quadrature(20)
    assert np.sum(rule.weights * rule.nodes ** 2) == pytest.approx(np.sqrt(np.pi) / 2, rel=1e-12)
    assert np.sum(rule.weights * rule.nodes ** 3) == pytest.approx(0.0, abs=1e-12)
    assert get_quadrature(20) is rule


@pytest.mark.parametrize("H", [0, 101])
def test_gauss_hermite_order_bounds(H):
    with pytest.raises(ValueError):
        gauss_hermite(H)


def test_symmetric_latents_give_uniform_argmax():
    P = argmax_probs(marginals(np.zeros((2, 4)), np.ones((2, 4))), get_quadrature(20)).numpy()
    np.testing.assert_allclose(P, 0.25, atol=1e-6)


def test_two_class_closed_form():
    mu = np.array([[0.3, -0.4], [1.0, 2.5]])
    var = np.array([[0.5, 1.2], [0.1, 2.0]])
    P = argmax_probs(marginals(mu, var), get_quadrature(50)).numpy()
    p1 = norm.cdf((mu[:, 1] - mu[:, 0]) / np.sqrt(var.sum(1)))
    np.testing.assert_allclose(P[:, 1], p1, atol=1e-6)
    np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-6)


def test_argmax_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(3, 5))
    var = rng.uniform(0.2, 2.0, size=(3, 5))
    P = argmax_probs(marginals(mu, var), get_quadrature(20)).numpy()
    samples = mu[None] + np.sqrt(var)[None] * rng.normal(size=(200_000, 3, 5))
    winners = samples.argmax(axis=2)
    mc = np.stack([(winners == c).mean(axis=0) for c in range(5)], axis=1)
    np.testing.assert_allclose(P, mc, atol=5e-3)


def test_dominant_latent_wins():
    P = argmax_probs(marginals([[8.0, 0.0, 0.0]], [[0.01, 0.01, 0.01]]), get_quadrature(20)).numpy()
    assert P[0, 0] > 1 - 1e-9


def test_argmax_rejects_non_positive_variance():
    with pytest.raises(tc.DomainError):
        argmax_probs(marginals(np.zeros((1, 2)), [[1.0, 0.0]]), get_quadrature(5))


def test_predictive_probabilities_and_floor():
    params = RobustmaxParams(10, beta=1e-3)
    P = np.eye(10)[[3, 7]]
    p = predictive_probs(P, params).numpy()
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)
    assert p[0, 3] == pytest.approx(1 - 1e-3)
    assert p[0, 0] == pytest.approx(1e-3 / 9)
    assert params.log_floor() == pytest.approx(-9.105, abs=1e-3)
    assert np.log(p.min()) >= params.log_floor() - 1e-12


def test_predictive_rejects_unnormalized_rows():
    params = RobustmaxParams(3)
    with pytest.raises(ValueError):
        predictive_probs([[0.5, 0.5, 0.5]], params)
    np.testing.assert_allclose(normalize_rows(tc.constant([[1.0, 1.0, 2.0]])).numpy(), [[0.25, 0.25, 0.5]])


def test_beta_validation_and_learnable_parameterization():
    with pytest.raises(ValueError):
        RobustmaxParams(3, beta=0.5)
    with pytest.raises(ValueError):
        RobustmaxParams(1)
    logit = RobustmaxParams.initial_logit(1e-3)
    params = RobustmaxParams(3, beta_logit=tc.constant(logit))
    assert params.learnable
    assert params.beta_value() == pytest.approx(1e-3, rel=1e-10)


def test_expected_log_likelihood_limits():
    params = RobustmaxParams(3, beta=1e-2)
    quad = get_quadrature(20)
    sure = variational_expectation(marginals([[10.0, 0.0, 0.0]], [[1e-4] * 3]), [0], params, quad).item()
    assert sure == pytest.approx(np.log(1 - 1e-2), abs=1e-8)
    wrong = variational_expectation(marginals([[10.0, 0.0, 0.0]], [[1e-4] * 3]), [1], params, quad).item()
    assert wrong == pytest.approx(np.log(1e-2 / 2), abs=1e-6)


def test_expected_log_likelihood_matches_monte_carlo():
    rng = np.random.default_rng(7)
    mu = rng.normal(size=(3, 3))
    var = rng.uniform(0.3, 2.0, size=(3, 3))
    labels = np.array([0, 2, 1])
    params = RobustmaxParams(3, beta=1e-2)
    quad_value = variational_expectation(marginals(mu, var), labels, params, get_quadrature(20)).numpy()

    log_hit, log_miss = np.log(1 - 1e-2), np.log(1e-2 / 2)
    total, total_sq, n = np.zeros(3), np.zeros(3), 0
    for _ in range(4):
        f = mu[None] + np.sqrt(var)[None] * rng.normal(size=(250_000, 3, 3))
        logp = np.where(f.argmax(axis=2) == labels[None], log_hit, log_miss)
        total += logp.sum(axis=0)
        total_sq += (logp ** 2).sum(axis=0)
        n += logp.shape[0]
    mc = total / n
    stderr = np.sqrt((total_sq / n - mc ** 2) / n)
    assert np.all(np.abs(quad_value - mc) <= 4 * stderr + 1e-4)


def test_expected_log_likelihood_rises_with_true_class_mean():
    params = RobustmaxParams(4)
    quad = get_quadrature(20)
    values = [variational_expectation(marginals([[m, 0.0, 0.2, -0.1]], [[0.5] * 4]), [0], params, quad).item()
              for m in np.linspace(-2, 3, 11)]
    assert np.all(np.diff(values) > 0)


def test_label_validation():
    params = RobustmaxParams(3)
    lm = marginals(np.zeros((2, 3)), np.ones((2, 3)))
    quad = get_quadrature(5)
    with pytest.raises(ValueError):
        variational_expectation(lm, [0, 3], params, quad)
    with pytest.raises(ValueError):
        variational_expectation(lm, [0.5, 1.0], params, quad)
    with pytest.raises(tc.ShapeError):
        variational_expectation(lm, [0], params, quad)


def test_expected_log_likelihood_gradients():
    rng = np.random.default_rng(1)
    mu, var = rng.normal(size=(3, 4)), rng.uniform(0.3, 1.5, size=(3, 4))
    logit = RobustmaxParams.initial_logit(0.05)
    labels = np.array([0, 2, 3])
    quad = get_quadrature(20)

    def objective(m, v, lg):
        params = RobustmaxParams(4, beta_logit=lg)
        return tc.reduce_sum(variational_expectation(LatentMarginals(m, v), labels, params, quad))

    graph = Graph()
    leaves = [graph.leaf(mu), graph.leaf(var), graph.leaf(logit)]
    analytic = graph.gradient(objective(*leaves), leaves)
    arrays = [mu, var, np.array(logit, dtype=float)]
    h = 1e-6
    for i, base in enumerate(arrays):
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            up, down = [a.copy() for a in arrays], [a.copy() for a in arrays]
            up[i][idx] += h
            down[i][idx] -= h
            numeric[idx] = (objective(*map(tc.constant, up)).item()
                            - objective(*map(tc.constant, down)).item()) / (2 * h)
        np.testing.assert_allclose(analytic[i], numeric, rtol=1e-4, atol=1e-7)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
