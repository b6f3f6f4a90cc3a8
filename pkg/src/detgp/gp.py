"""Sparse-GP structural embedding layer.

The training path only uses the posterior mean

    S = P*^T K_XZ (K_ZZ + sigma I)^{-1} U

with the linear-plus-bias kernel ``k(x, y) = x.y + C``. The covariance
functions further down are diagnostics for small graphs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .graph import (
    TransitionMatrix,
    diffuse,
    diffuse_transposed,
    hop_powers,
    materialize_pstar,
)

COVARIANCE_GUARD = 4096
EXPAND_GUARD = 256
POSTERIOR_GUARD = 2048


class FactorizationError(linalg.LinAlgError):
    """Cholesky of the jittered inducing kernel failed."""


@dataclass
class InducingPointSet:
    Z: np.ndarray
    U: np.ndarray
    C: float = 1.0
    sigma: float = 1e-3

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        if self.Z.ndim != 2 or self.U.ndim != 2 or self.Z.shape[0] != self.U.shape[0]:
            raise ValueError(f"Z {self.Z.shape} and U {self.U.shape} must share the row count")
        if self.Z.shape[0] < 1:
            raise ValueError("need at least one inducing point")
        if not self.C > 0 or not self.sigma > 0:
            raise ValueError("kernel bias C and jitter sigma must be positive")

    @property
    def num_points(self) -> int:
        return self.Z.shape[0]


def kernel(x: np.ndarray, y: np.ndarray, C: float) -> float:
    return float(np.dot(x, y) + C)


def cross_kernel(X: np.ndarray, Z: np.ndarray, C: float) -> np.ndarray:
    X = np.atleast_2d(X)
    Z = np.atleast_2d(Z)
    if X.shape[1] != Z.shape[1]:
        raise ValueError(f"feature dims differ: {X.shape[1]} vs {Z.shape[1]}")
    return X @ Z.T + C


def factor_inducing(Z: np.ndarray, C: float, sigma: float):
    """Cholesky factor of ``K_ZZ + sigma I`` in scipy ``cho_factor`` form."""
    A = cross_kernel(Z, Z, C)
    A[np.diag_indices_from(A)] += sigma
    try:
        return linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError:
        # report the smallest diagonal pivot of an LDL^T factorization
        _, d, _ = linalg.ldl(A, lower=True)
        pivot = float(np.min(np.diag(d)))
        raise FactorizationError(
            f"K_ZZ + sigma*I is not positive definite (smallest pivot {pivot:.3e})"
        ) from None


@dataclass
class StructuralCache:
    """Forward intermediates needed by :func:`structural_mean_backward`."""

    X: np.ndarray
    Z: np.ndarray
    P: TransitionMatrix
    alpha: np.ndarray
    C: float
    factor: tuple
    K_XZ: np.ndarray
    B: np.ndarray
    Y: np.ndarray


def structural_mean(X, P: TransitionMatrix, alpha, ind: InducingPointSet, return_cache=False):
    """Posterior-mean structural embeddings, one row per node."""
    X = np.asarray(X, dtype=np.float64)
    factor = factor_inducing(ind.Z, ind.C, ind.sigma)
    K_XZ = cross_kernel(X, ind.Z, ind.C)
    B = linalg.cho_solve(factor, ind.U)
    Y = K_XZ @ B
    S = diffuse_transposed(P, alpha, Y)
    if not return_cache:
        return S
    cache = StructuralCache(X, ind.Z, P, np.asarray(alpha, dtype=np.float64), ind.C, factor, K_XZ, B, Y)
    return S, cache


def softmax_backward(alpha: np.ndarray, grad_alpha: np.ndarray) -> np.ndarray:
    return alpha * (grad_alpha - np.dot(alpha, grad_alpha))


def structural_mean_backward(grad_S: np.ndarray, cache: Optional[StructuralCache]) -> dict:
    """Reverse-mode gradients of the posterior mean.

    Returns a dict with keys ``X``, ``Z``, ``U`` and ``logits``; the graph
    is treated as constant.
    """
    if cache is None:
        raise ValueError("structural_mean_backward needs the cache from a forward pass")
    G = np.asarray(grad_S, dtype=np.float64)
    alpha = cache.alpha
    J = alpha.size - 1
    # P^j G for every hop gives both dY and the per-hop weights
    G_hops = hop_powers(cache.P, G, J)
    grad_alpha = np.array([np.sum(g * cache.Y) for g in G_hops])
    dY = diffuse(cache.P, alpha, G)

    dB = cache.K_XZ.T @ dY
    dK_XZ = dY @ cache.B.T
    dU = linalg.cho_solve(cache.factor, dB)
    dA = -dU @ cache.B.T
    dZ = (dA + dA.T) @ cache.Z + dK_XZ.T @ cache.X
    dX = dK_XZ @ cache.Z
    return {"X": dX, "Z": dZ, "U": dU, "logits": softmax_backward(alpha, grad_alpha)}


def prior_covariance(X, P: TransitionMatrix, alpha, C: float) -> np.ndarray:
    """Dense ``P*^T K_XX P*``."""
    n = np.asarray(X).shape[0]
    if n > COVARIANCE_GUARD:
        raise ValueError(f"prior covariance limited to N <= {COVARIANCE_GUARD}, got {n}")
    pstar = materialize_pstar(P, alpha)
    return pstar.T @ cross_kernel(X, X, C) @ pstar


def covariance_expand(n: int, n2: int, X, P: TransitionMatrix, alpha, C: float) -> float:
    """Entry ``(n, n2)`` of the prior covariance, summed hop by hop.

    Splits the sum into the local term, the two cross terms that mix the
    zero-hop node with multi-hop walks ending at the other node, and the
    double sum over walk pairs. Transition probabilities enter as walks
    ``r -> n`` so the result matches ``P*^T K_XX P*``.
    """
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    if N > EXPAND_GUARD:
        raise ValueError(f"covariance_expand limited to N <= {EXPAND_GUARD}, got {N}")
    for idx in (n, n2):
        if not 0 <= idx < N:
            raise IndexError(f"node index {idx} out of range")
    alpha = np.asarray(alpha, dtype=np.float64)
    J = alpha.size - 1
    dense = P.forward.toarray()
    powers = [np.eye(N)]
    for _ in range(J):
        powers.append(powers[-1] @ dense)

    K = X @ X.T + C
    total = alpha[0] ** 2 * K[n, n2]
    for j in range(1, J + 1):
        total += alpha[0] * alpha[j] * (powers[j][:, n2] @ K[n])
        total += alpha[0] * alpha[j] * (powers[j][:, n] @ K[:, n2])
    for j in range(1, J + 1):
        for j2 in range(1, J + 1):
            total += alpha[j] * alpha[j2] * (powers[j][:, n] @ K @ powers[j2][:, n2])
    return float(total)


def node_inducing_covariance(n: int, m: int, X, Z, P: TransitionMatrix, alpha, C: float) -> float:
    """Covariance between node ``n``'s structural output and inducing output ``m``."""
    X = np.asarray(X, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if not 0 <= n < X.shape[0] or not 0 <= m < Z.shape[0]:
        raise IndexError(f"index ({n}, {m}) out of range")
    alpha = np.asarray(alpha, dtype=np.float64)
    kz = X @ Z[m] + C
    total = alpha[0] * kz[n]
    # walk probabilities into n, one hop at a time
    e = np.zeros(X.shape[0])
    e[n] = 1.0
    for j in range(1, alpha.size):
        e = P.forward @ e
        total += alpha[j] * float(e @ kz)
    return float(total)


def posterior_covariance(X, P: TransitionMatrix, alpha, ind: InducingPointSet) -> np.ndarray:
    """Dense ``P*^T (K_XX - K_XZ (K_ZZ + sigma I)^{-1} K_ZX) P*``."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if n > POSTERIOR_GUARD:
        raise ValueError(f"posterior covariance limited to N <= {POSTERIOR_GUARD}, got {n}")
    factor = factor_inducing(ind.Z, ind.C, ind.sigma)
    K_XZ = cross_kernel(X, ind.Z, ind.C)
    inner = cross_kernel(X, X, ind.C) - K_XZ @ linalg.cho_solve(factor, K_XZ.T)
    pstar = materialize_pstar(P, alpha)
    out = pstar.T @ inner @ pstar
    return 0.5 * (out + out.T)
