#!/usr/bin/env python3
"""
GPDNN Robustmax Likelihood
Gauss-Hermite quadrature for argmax probabilities and expected log-likelihoods.
"""

import logging
from typing import Any, Dict, NamedTuple, Optional

import numpy as np

import tensor_core as tc
from gp_layer import LatentMarginals
from tensor_core import Tensor

logger = logging.getLogger(__name__)

DEFAULT_BETA = 1e-3
DEFAULT_QUADRATURE_POINTS = 20
MAX_QUADRATURE_POINTS = 100
ROW_SUM_TOLERANCE = 1e-6
BETA_PARAM = "lik.beta_logit"


class QuadratureRule(NamedTuple):
    nodes: np.ndarray
    weights: np.ndarray


def gauss_hermite(H: int) -> QuadratureRule:
    """Physicists' Gauss-Hermite rule from the Jacobi matrix eigensystem"""
    if not 1 <= H <= MAX_QUADRATURE_POINTS:
        raise ValueError(f"quadrature order must be in [1, {MAX_QUADRATURE_POINTS}], got {H}")
    if H == 1:
        return QuadratureRule(np.zeros(1), np.array([np.sqrt(np.pi)]))
    off = np.sqrt(np.arange(1, H) / 2.0)
    jacobi = np.diag(off, 1) + np.diag(off, -1)
    nodes, vectors = np.linalg.eigh(jacobi)
    weights = np.sqrt(np.pi) * vectors[0] ** 2
    order = np.argsort(nodes)
    nodes, weights = nodes[order], weights[order]
    # exact symmetry about zero
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    weights *= np.sqrt(np.pi) / weights.sum()
    return QuadratureRule(nodes, weights)


_rules: Dict[int, QuadratureRule] = {}


def get_quadrature(H: int = DEFAULT_QUADRATURE_POINTS) -> QuadratureRule:
    """Get or build the cached rule of order H"""
    if H not in _rules:
        _rules[H] = gauss_hermite(H)
    return _rules[H]


class RobustmaxParams:
    """β either fixed or learnable through β = 0.5 * sigmoid(logit)"""

    def __init__(self, num_classes: int, beta: float = DEFAULT_BETA, beta_logit: Optional[Tensor] = None):
        if num_classes < 2:
            raise ValueError("robustmax needs at least two classes")
        if beta_logit is None and not 0.0 <= beta < 0.5:
            raise ValueError(f"beta must lie in [0, 0.5), got {beta}")
        self.num_classes = num_classes
        self.beta_logit = beta_logit
        self._beta = float(beta)

    @property
    def learnable(self) -> bool:
        return self.beta_logit is not None

    @property
    def beta(self) -> Any:
        """β as a tensor when learnable, a float otherwise"""
        if self.beta_logit is None:
            return self._beta
        return 0.5 * tc.sigmoid(self.beta_logit)

    def beta_value(self) -> float:
        beta = self.beta
        return beta.item() if isinstance(beta, Tensor) else beta

    @staticmethod
    def initial_logit(beta: float = DEFAULT_BETA) -> np.ndarray:
        p = 2.0 * beta
        return np.array(np.log(p / (1.0 - p)))

    def log_floor(self) -> float:
        """Lowest attainable log predictive probability, log(β/(C−1))"""
        return float(np.log(self.beta_value() / (self.num_classes - 1)))

    def to_dict(self) -> Dict[str, Any]:
        return {"num_classes": self.num_classes, "beta": self.beta_value(), "learnable": self.learnable}


def argmax_probs(lm: LatentMarginals, quad: QuadratureRule) -> Tensor:
    """P(argmax f = c) for independent Gaussian latents, shape [B, C]"""
    mu, var = lm
    if np.any(var.data <= 0.0):
        raise tc.DomainError("argmax_probs: non-positive latent variance")
    B, C = mu.shape
    H = len(quad.nodes)
    sigma = tc.sqrt(var)

    # X[b, c, h]: quadrature abscissae of latent c
    X = tc.reshape(mu, (B, C, 1)) + tc.reshape(np.sqrt(2.0) * sigma, (B, C, 1)) * quad.nodes
    # z[b, c, j, h] = (X[b, c, h] - mu[b, j]) / sigma[b, j]
    z = (tc.reshape(X, (B, C, 1, H)) - tc.reshape(mu, (B, 1, C, 1))) / tc.reshape(sigma, (B, 1, C, 1))
    cdf = tc.normal_cdf(z)
    eye = np.eye(C).reshape(1, C, C, 1)
    cdf = cdf * (1.0 - eye) + eye
    integrand = tc.reduce_prod(cdf, axis=2)                                   # [B, C, H]
    return tc.reduce_sum(integrand * (quad.weights / np.sqrt(np.pi)), axis=2)


def normalize_rows(P: Tensor) -> Tensor:
    return P / tc.reduce_sum(P, axis=1, keepdims=True)


def predictive_probs(P: Any, params: RobustmaxParams, tolerance: float = ROW_SUM_TOLERANCE) -> Tensor:
    """p(y = c) = (1 − β) P_c + β/(C − 1) (1 − P_c)"""
    P = tc._wrap(P)
    if P.shape[-1] != params.num_classes:
        raise tc.ShapeError(f"expected {params.num_classes} classes, got {P.shape[-1]}")
    deviation = np.max(np.abs(P.data.sum(axis=-1) - 1.0)) if P.size else 0.0
    if deviation > tolerance:
        raise ValueError(f"argmax probabilities do not sum to 1 (max deviation {deviation:.3g})")
    beta = params.beta
    other = beta / (params.num_classes - 1)
    return P * (1.0 - beta) + (1.0 - P) * other


def _label_onehot(labels: Any, num_classes: int, batch: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise tc.ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if np.any(labels != np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return np.eye(num_classes)[labels]


def variational_expectation(lm: LatentMarginals, labels: Any, params: RobustmaxParams,
                            quad: QuadratureRule) -> Tensor:
    """E_q[log p(y | f)] per row, shape [B]"""
    B = lm.mean.shape[0]
    onehot = _label_onehot(labels, params.num_classes, B)
    P = argmax_probs(lm, quad)
    p_y = tc.reduce_sum(P * onehot, axis=1)
    beta = params.beta
    log = tc.log if isinstance(beta, Tensor) else np.log
    log_hit = log(1.0 - beta)
    log_miss = log(beta / (params.num_classes - 1))
    return p_y * log_hit + (1.0 - p_y) * log_miss
