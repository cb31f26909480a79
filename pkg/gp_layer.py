#!/usr/bin/env python3
"""
GPDNN Sparse Variational GP Head
Kernels, whitened inducing-point marginals q(f_x) and the KL term of the bound.
"""

import logging
from enum import Enum
from typing import Any, Dict, Mapping, NamedTuple, Optional

import numpy as np
from scipy.spatial.distance import pdist

import tensor_core as tc
from tensor_core import CholeskyError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-6
MAX_JITTER = 1e-2
DEFAULT_NOISE = 1e-3
GP_PREFIX = "gp."


class KernelKind(Enum):
    RBF = "rbf"
    LINEAR = "linear"


class KernelParams:
    """Kernel hyperparameters held as log-valued tensors.

    `log_lengthscale` is None for the linear kernel; `log_noise` is None
    for a noiseless kernel (white-noise variance exactly zero).
    """

    def __init__(self, kind: KernelKind, log_variance: Tensor,
                 log_lengthscale: Optional[Tensor] = None, log_noise: Optional[Tensor] = None):
        self.kind = KernelKind(kind)
        self.log_variance = log_variance
        self.log_lengthscale = log_lengthscale if self.kind is KernelKind.RBF else None
        self.log_noise = log_noise
        if self.kind is KernelKind.RBF and log_lengthscale is None:
            raise ValueError("rbf kernel needs a lengthscale")

    @classmethod
    def create(cls, kind: Any, variance: float = 1.0, lengthscale: float = 1.0,
               noise: float = DEFAULT_NOISE) -> "KernelParams":
        if variance <= 0 or lengthscale <= 0 or noise < 0:
            raise ValueError("kernel variance and lengthscale must be positive, noise non-negative")
        kind = KernelKind(kind)
        return cls(
            kind,
            tc.constant(np.log(variance)),
            tc.constant(np.log(lengthscale)) if kind is KernelKind.RBF else None,
            tc.constant(np.log(noise)) if noise > 0 else None,
        )

    @property
    def variance(self) -> Tensor:
        return tc.exp(self.log_variance)

    @property
    def noise(self) -> Optional[Tensor]:
        return None if self.log_noise is None else tc.exp(self.log_noise)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "variance": float(np.exp(self.log_variance.item())),
            "lengthscale": None if self.log_lengthscale is None else float(np.exp(self.log_lengthscale.item())),
            "noise": 0.0 if self.log_noise is None else float(np.exp(self.log_noise.item())),
        }


class LatentMarginals(NamedTuple):
    mean: Tensor      # [B, C]
    variance: Tensor  # [B, C]


def kernel_matrix(params: KernelParams, A: Any, B: Any, same_inputs: bool = False) -> Tensor:
    """k(A, B) with white noise on the diagonal only when same_inputs"""
    A, B = tc._wrap(A), tc._wrap(B)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise tc.ShapeError(f"kernel_matrix: incompatible inputs {A.shape} and {B.shape}")

    if params.kind is KernelKind.RBF:
        inv_ls = tc.exp(tc.neg(params.log_lengthscale))
        As, Bs = A * inv_ls, B * inv_ls
        a2 = tc.reduce_sum(tc.square(As), axis=1, keepdims=True)
        b2 = tc.reshape(tc.reduce_sum(tc.square(Bs), axis=1), (1, B.shape[0]))
        sqdist = a2 + b2 - 2.0 * (As @ Bs.T)
        K = params.variance * tc.exp(-0.5 * sqdist)
    else:
        K = params.variance * (A @ B.T)

    if same_inputs and params.log_noise is not None:
        if A.shape[0] != B.shape[0]:
            raise tc.ShapeError("same_inputs needs equally sized inputs")
        K = K + params.noise * np.eye(A.shape[0])
    return K


def kernel_diag(params: KernelParams, A: Any) -> Tensor:
    """k(x, x) for every row of A, white noise included"""
    A = tc._wrap(A)
    if params.kind is KernelKind.RBF:
        diag = params.variance * np.ones(A.shape[0])
    else:
        diag = params.variance * tc.reduce_sum(tc.square(A), axis=1)
    if params.log_noise is not None:
        diag = diag + params.noise
    return diag


class GPLayerState:
    """Inducing inputs, whitened per-class variational parameters and kernel.

    q_sqrt_raw holds L_c with its diagonal stored as log(L_c[i, i]), so the
    materialized factor always has a positive diagonal.
    """

    def __init__(self, Z: Tensor, q_mu: Tensor, q_sqrt_raw: Tensor, kernel: KernelParams):
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise ValueError(f"Z must be [M, D] with M >= 1, got {Z.shape}")
        M = Z.shape[0]
        C = q_mu.shape[0]
        if q_mu.shape != (C, M) or q_sqrt_raw.shape != (C, M, M):
            raise ValueError(f"variational shapes {q_mu.shape}/{q_sqrt_raw.shape} do not match M={M}")
        self.Z = Z
        self.q_mu = q_mu
        self.q_sqrt_raw = q_sqrt_raw
        self.kernel = kernel

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def num_latents(self) -> int:
        return self.q_mu.shape[0]

    @classmethod
    def from_values(cls, Z: Any, q_mu: Any, q_sqrt: Any, kernel: KernelParams) -> "GPLayerState":
        """Build from explicit L_c factors (diagonal must be positive)"""
        q_sqrt = np.array(q_sqrt, dtype=np.float64)
        diag = np.diagonal(q_sqrt, axis1=1, axis2=2)
        if np.any(diag <= 0):
            raise ValueError("L_c diagonal must be positive")
        raw = np.tril(q_sqrt, -1)
        idx = np.arange(q_sqrt.shape[1])
        raw[:, idx, idx] = np.log(diag)
        return cls(tc.constant(Z), tc.constant(q_mu), tc.constant(raw), kernel)

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], kind: Any) -> "GPLayerState":
        kernel = KernelParams(
            KernelKind(kind),
            params[GP_PREFIX + "log_variance"],
            params.get(GP_PREFIX + "log_lengthscale"),
            params.get(GP_PREFIX + "log_noise"),
        )
        return cls(params[GP_PREFIX + "Z"], params[GP_PREFIX + "q_mu"], params[GP_PREFIX + "q_sqrt_raw"], kernel)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        out = {
            GP_PREFIX + "Z": self.Z.numpy(),
            GP_PREFIX + "q_mu": self.q_mu.numpy(),
            GP_PREFIX + "q_sqrt_raw": self.q_sqrt_raw.numpy(),
            GP_PREFIX + "log_variance": self.kernel.log_variance.numpy(),
        }
        if self.kernel.log_lengthscale is not None:
            out[GP_PREFIX + "log_lengthscale"] = self.kernel.log_lengthscale.numpy()
        if self.kernel.log_noise is not None:
            out[GP_PREFIX + "log_noise"] = self.kernel.log_noise.numpy()
        return out

    def log_diag(self) -> Tensor:
        """log L_c[i, i], shape [C, M]"""
        eye = np.eye(self.num_inducing)
        return tc.reduce_sum(self.q_sqrt_raw * eye, axis=2)

    def q_sqrt(self) -> Tensor:
        """Lower-triangular L_c factors, shape [C, M, M]"""
        M = self.num_inducing
        strict = np.tril(np.ones((M, M)), -1)
        diag = tc.exp(self.log_diag())
        return self.q_sqrt_raw * strict + tc.reshape(diag, (self.num_latents, M, 1)) * np.eye(M)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_inducing": self.num_inducing,
            "num_latents": self.num_latents,
            "input_dim": self.Z.shape[1],
            "kernel": self.kernel.to_dict(),
        }


def _chol_with_jitter(K: Tensor, jitter: float = DEFAULT_JITTER) -> Tensor:
    """Cholesky of K + jitter*I, doubling jitter up to MAX_JITTER"""
    n = K.shape[0]
    current = jitter
    while True:
        try:
            return tc.cholesky(K + current * np.eye(n))
        except CholeskyError as e:
            if current * 2 > MAX_JITTER:
                raise CholeskyError(e.pivot, jitter=current) from e
            logger.warning(f"K_zz factorization failed at pivot {e.pivot} with jitter {current:g}; retrying")
            current *= 2


def latent_marginals(state: GPLayerState, features: Any, jitter: float = DEFAULT_JITTER) -> LatentMarginals:
    """Marginals of q(f_x) for every class under the whitened parameterization"""
    X = tc._wrap(features)
    if X.ndim != 2 or X.shape[1] != state.Z.shape[1]:
        raise tc.ShapeError(f"features {X.shape} do not match inducing inputs {state.Z.shape}")
    C, M, B = state.num_latents, state.num_inducing, X.shape[0]

    Kzz = kernel_matrix(state.kernel, state.Z, state.Z, same_inputs=True)
    Lzz = _chol_with_jitter(Kzz, jitter)
    Kzx = kernel_matrix(state.kernel, state.Z, X)
    A = tc.triangular_solve(Lzz, Kzx, lower=True)                    # [M, B]

    mean = tc.transpose(state.q_mu @ A)                                  # [B, C]

    LtA = tc.transpose(state.q_sqrt()) @ tc.reshape(A, (1, M, B))      # [C, M, B]
    explained = tc.reduce_sum(tc.square(LtA), axis=1)                  # [C, B]
    prior = kernel_diag(state.kernel, X) - tc.reduce_sum(tc.square(A), axis=0)
    variance = tc.transpose(explained + tc.reshape(prior, (1, B)))
    return LatentMarginals(mean, variance)


def kl_to_prior(state: GPLayerState) -> Tensor:
    """Sum over classes of KL(N(m_c, S_c) || N(0, I))"""
    C, M = state.num_latents, state.num_inducing
    L = state.q_sqrt()
    trace = tc.reduce_sum(tc.square(L))
    mahalanobis = tc.reduce_sum(tc.square(state.q_mu))
    logdet = 2.0 * tc.reduce_sum(state.log_diag())
    return 0.5 * (trace + mahalanobis - C * M - logdet)


def median_lengthscale(sample: np.ndarray) -> float:
    """Median pairwise Euclidean distance; 1.0 when degenerate"""
    if sample.shape[0] < 2:
        return 1.0
    d = pdist(sample)
    med = float(np.median(d))
    return med if med > 0 else 1.0


def init_gp_head(features_sample: Any, num_inducing: int, kind: Any, num_latents: int,
                 seed: int = 0, noise: float = DEFAULT_NOISE) -> GPLayerState:
    """Fresh head: Z from sample rows, m_c = 0, L_c = I, median-heuristic lengthscale"""
    sample = np.asarray(tc._as_array(features_sample), dtype=np.float64)
    if sample.ndim != 2:
        raise ValueError(f"feature sample must be [N, D], got {sample.shape}")
    n = sample.shape[0]
    if n < num_inducing:
        raise ValueError(f"need at least {num_inducing} feature rows, got {n}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=num_inducing, replace=False)
    Z = sample[idx]
    lengthscale = median_lengthscale(sample)
    kernel = KernelParams.create(kind, variance=1.0, lengthscale=lengthscale, noise=noise)
    logger.info(f"GP head initialized: M={num_inducing}, D={sample.shape[1]}, "
                f"kernel={KernelKind(kind).value}, lengthscale={lengthscale:.4g}")
    return GPLayerState(
        tc.constant(Z),
        tc.constant(np.zeros((num_latents, num_inducing))),
        tc.constant(np.zeros((num_latents, num_inducing, num_inducing))),
        kernel,
    )
