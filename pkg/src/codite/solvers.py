"""Dense symmetric linear algebra used by the estimators.

No explicit inverses are formed: ridge systems are applied through a
Cholesky factor, and the tensor-product ridge system of pairwise U-statistic
regression is solved through one eigendecomposition of the base Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
import scipy.linalg as sla

from .errors import ArgumentError, NumericError

DENSE_TUPLE_LIMIT = 4096


def _square(M, name="M") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ArgumentError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ArgumentError(f"{name} contains non-finite entries")
    return M


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor of ``M + ridge * I``."""

    lower: np.ndarray
    ridge: float

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def solve(self, B) -> np.ndarray:
        return sla.cho_solve((self.lower, True), np.asarray(B, dtype=float), check_finite=False)

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def _smallest_pivot(A: np.ndarray) -> float:
    _, d, _ = sla.ldl(A, lower=True)
    return float(np.min(np.diag(d)))


def spd_factor(M, ridge: float = 0.0) -> SpdFactor:
    M = _square(M)
    if ridge < 0 or not np.isfinite(ridge):
        raise ArgumentError(f"ridge must be a non-negative finite number, got {ridge!r}")
    A = M + ridge * np.eye(M.shape[0])
    try:
        lower = sla.cholesky(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"Cholesky factorization failed (matrix not positive definite after ridge={ridge:g}); "
            f"smallest pivot {_smallest_pivot(A):.3e}"
        ) from exc
    return SpdFactor(lower, float(ridge))


def spd_solve(M, ridge: float, B) -> np.ndarray:
    """Solve ``(M + ridge * I) X = B`` for symmetric M."""
    return spd_factor(M, ridge).solve(B)


def sym_eigen(M) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    M = _square(M)
    return np.linalg.eigh(M)


def kron_ridge_solve(K, ridge: float, rhs, r: int = 2, eig=None) -> np.ndarray:
    """Solve ``(K ⊗ ... ⊗ K + ridge * I) c = rhs`` over all n^r index tuples.

    ``rhs`` and the result are flattened in C order, so entry
    ``(i_1, ..., i_r)`` sits at ``np.ravel_multi_index``. For r = 2 the system
    is never materialized: with K = V diag(w) V^T the solution is
    ``V [(V^T R V) / (w w^T + ridge)] V^T``. ``eig`` may carry a precomputed
    ``(w, V)`` pair.
    """
    K = _square(K, "K")
    n = K.shape[0]
    if not ridge > 0:
        raise ArgumentError(f"ridge must be positive, got {ridge!r}")
    if r < 1:
        raise ArgumentError(f"arity must be >= 1, got {r}")
    rhs = np.asarray(rhs, dtype=float).ravel()
    if rhs.shape[0] != n**r:
        raise ArgumentError(f"rhs has length {rhs.shape[0]}, expected n^r = {n**r}")
    if r == 1:
        return spd_solve(K, ridge, rhs)
    if r == 2:
        w, V = sym_eigen(K) if eig is None else eig
        R = rhs.reshape(n, n)
        inner = V.T @ R @ V
        inner /= np.outer(w, w) + ridge
        return (V @ inner @ V.T).ravel()
    if n**r > DENSE_TUPLE_LIMIT:
        raise ArgumentError(f"dense fallback for r={r} limited to n^r <= {DENSE_TUPLE_LIMIT}, got {n**r}")
    return np.linalg.solve(kron_power(K, r) + ridge * np.eye(n**r), rhs)


def kron_power(K: np.ndarray, r: int) -> np.ndarray:
    out = K
    for _ in range(r - 1):
        out = np.kron(out, K)
    return out


def kron_matvec(K: np.ndarray, c: np.ndarray, r: int) -> np.ndarray:
    """Apply ``K ⊗ ... ⊗ K`` (r factors) to a flattened tensor without forming it."""
    n = K.shape[0]
    T = np.asarray(c, dtype=float).reshape((n,) * r)
    for axis in range(r):
        T = np.moveaxis(np.tensordot(K, T, axes=([1], [axis])), 0, axis)
    return T.ravel()


def ustat_ridge(n: int, r: int, lam: float) -> float:
    """Ridge of the representer system: binom(n, r) * lambda."""
    return comb(n, r) * lam
