"""Kernel conditional discrepancy (KCD) test of equal conditional outcome laws.

The statistic is ``t_hat = (1/n) sum_i ||mu_hat_1(x_i) - mu_hat_0(x_i)||^2`` over
the pooled covariates. Its null distribution is simulated by redrawing the
treatment labels from (estimated) propensity scores and recomputing the
statistic with kernels and ridge weights frozen.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import expit

from .cme import RIDGE_FLOOR, default_lambda
from .data import Dataset
from .errors import ArgumentError, DegenerateInputError
from .kernels import KernelSpec, as_points, gram
from .solvers import spd_factor

DEFAULT_CLIP = 0.01
DEFAULT_KLR_RIDGE = 0.1
MAX_REDRAWS = 100


def thread_count(n_jobs: int | None = None) -> int:
    if n_jobs is not None:
        return max(1, int(n_jobs))
    env = os.environ.get("CODITE_THREADS")
    return max(1, int(env)) if env else 1


# --- propensity ---------------------------------------------------------------


@dataclass(frozen=True)
class PropensityModel:
    k_spec: KernelSpec
    X_train: np.ndarray
    dual_weights: np.ndarray
    intercept: float
    clip_eps: float = DEFAULT_CLIP
    converged: bool = True
    n_iter: int = 0

    def decision(self, Xq) -> np.ndarray:
        Xq = as_points(Xq, "x")
        if Xq.shape[1] != self.X_train.shape[1]:
            raise ArgumentError(f"query dimension {Xq.shape[1]} != training dimension {self.X_train.shape[1]}")
        return gram(self.k_spec, Xq, self.X_train) @ self.dual_weights + self.intercept

    def predict(self, Xq) -> np.ndarray:
        return np.clip(expit(self.decision(Xq)), self.clip_eps, 1.0 - self.clip_eps)


def predict_propensity(model: PropensityModel, x) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(model.predict(x[None, :])[0])


def _klr_objective(K, z, a, b, rho):
    f = K @ a + b
    return float(np.sum(np.logaddexp(0.0, f) - z * f) + 0.5 * rho * a @ K @ a)


def fit_propensity_klr(X, z, k_spec: KernelSpec, ridge: float = DEFAULT_KLR_RIDGE, max_iter: int = 100,
                       tol: float = 1e-8, clip_eps: float = DEFAULT_CLIP) -> PropensityModel:
    """Kernel logistic regression by iteratively reweighted least squares.

    Minimizes ``(1/n) sum_i logloss(z_i, f(x_i)) + (ridge/2) ||f - b||^2`` with
    ``f = K a + b`` and an unpenalized intercept b. Each Newton step solves the
    bordered system ``[[K + rho W^-1, 1], [1^T, 0]] [a; b] = [t; 0]`` where
    ``rho = n * ridge``, W the logistic weights and t the working response.
    """
    X = as_points(X, "X")
    z = np.asarray(z, dtype=float).ravel()
    n = X.shape[0]
    if z.shape[0] != n:
        raise ArgumentError(f"X has {n} rows but z has {z.shape[0]} entries")
    if not np.all(np.isin(z, (0.0, 1.0))):
        raise ArgumentError("labels must be 0 or 1")
    if z.min() == z.max():
        raise ArgumentError("labels contain a single class")
    if not ridge > 0:
        raise ArgumentError(f"ridge must be positive, got {ridge!r}")
    if not 0 < clip_eps < 0.5:
        raise ArgumentError(f"clip_eps must lie in (0, 0.5), got {clip_eps!r}")
    K = gram(k_spec, X)
    rho = n * ridge
    zbar = z.mean()
    a = np.zeros(n)
    b = float(np.log(zbar / (1 - zbar)))
    obj = _klr_objective(K, z, a, b, rho)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        f = K @ a + b
        p = expit(f)
        w = np.maximum(p * (1 - p), 1e-10)
        t = f + (z - p) / w
        A = np.empty((n + 1, n + 1))
        A[:n, :n] = K + np.diag(rho / w)
        A[:n, n] = 1.0
        A[n, :n] = 1.0
        A[n, n] = 0.0
        sol = sla.solve(A, np.append(t, 0.0), assume_a="sym")
        da, db = sol[:n] - a, sol[n] - b
        step = 1.0
        while True:
            new_obj = _klr_objective(K, z, a + step * da, b + step * db, rho)
            if new_obj <= obj + 1e-12 * abs(obj) or step < 1e-6:
                break
            step *= 0.5
        a, b, obj = a + step * da, b + step * db, new_obj
        if max(np.max(np.abs(step * da)), abs(step * db)) < tol:
            converged = True
            break
    return PropensityModel(k_spec, X, a, float(b), clip_eps, converged, it)


# --- statistic ------------------------------------------------------------------


class PooledKernels:
    """Kernel matrices over the pooled sample, reused across relabelings.

    With ``M = K K`` (K the pooled covariate Gram) the statistic only needs
    sub-blocks of M, L and K for a given labeling.
    """

    def __init__(self, X, y, k_spec: KernelSpec, l_spec: KernelSpec):
        self.X = as_points(X, "X")
        self.y = np.asarray(y, dtype=float).ravel()
        self.K = gram(k_spec, self.X)
        self.L = gram(l_spec, self.y)
        self.M = self.K @ self.K

    @property
    def n(self) -> int:
        return self.K.shape[0]

    def statistic(self, z, lambda0: float, lambda1: float) -> float:
        z = np.asarray(z).ravel()
        i0 = np.flatnonzero(z == 0)
        i1 = np.flatnonzero(z == 1)
        if len(i0) < 2 or len(i1) < 2:
            raise DegenerateInputError(f"each group needs at least 2 points (n0={len(i0)}, n1={len(i1)})")
        K00 = self.K[np.ix_(i0, i0)]
        K11 = self.K[np.ix_(i1, i1)]
        f0 = spd_factor(K00, max(len(i0) * lambda0, RIDGE_FLOOR * np.trace(K00)))
        f1 = spd_factor(K11, max(len(i1) * lambda1, RIDGE_FLOOR * np.trace(K11)))
        n0 = len(i0)
        n1 = len(i1)
        S0 = f0.solve(np.hstack([self.L[np.ix_(i0, i0)], self.M[np.ix_(i0, i0)], self.L[np.ix_(i0, i1)]]))
        S1 = f1.solve(np.hstack([self.L[np.ix_(i1, i1)], self.M[np.ix_(i1, i1)], self.M[np.ix_(i1, i0)]]))
        P0, Q0, R0 = S0[:, :n0], S0[:, n0:2 * n0], S0[:, 2 * n0:]
        P1, Q1, R1 = S1[:, :n1], S1[:, n1:2 * n1], S1[:, 2 * n1:]
        # Tr(W0 L00 W0 M00) - 2 Tr(W0 L01 W1 M10) + Tr(W1 L11 W1 M11)
        t = np.sum(P0 * Q0.T) - 2.0 * np.sum(R0 * R1.T) + np.sum(P1 * Q1.T)
        return float(t / self.n)


def _default_lambdas(z, lambda0, lambda1):
    n0 = int(np.sum(z == 0))
    n1 = int(np.sum(z == 1))
    lam0 = default_lambda(n0) if lambda0 is None else float(lambda0)
    lam1 = default_lambda(n1) if lambda1 is None else float(lambda1)
    if not (lam0 > 0 and lam1 > 0):
        raise ArgumentError("regularization weights must be positive")
    return lam0, lam1


def kcd_statistic(data: Dataset, k_spec: KernelSpec, l_spec: KernelSpec, lambda0: float | None = None,
                  lambda1: float | None = None) -> float:
    lam0, lam1 = _default_lambdas(data.z, lambda0, lambda1)
    return PooledKernels(data.X, data.y, k_spec, l_spec).statistic(data.z, lam0, lam1)


# --- test -------------------------------------------------------------------------


@dataclass
class KcdTestResult:
    t_hat: float
    null_stats: list
    p_value: float
    alpha: float
    rejected: bool
    m: int
    seed: int
    lambda0: float = float("nan")
    lambda1: float = float("nan")
    propensity: str = "klr"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("extra")
        d.update(self.extra)
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def p_value(t_hat: float, null_stats) -> float:
    null_stats = np.asarray(null_stats, dtype=float)
    return (1 + int(np.sum(null_stats > t_hat))) / (1 + null_stats.shape[0])


def permutation_rng(seed: int, k: int) -> np.random.Generator:
    """Independent stream for the k-th relabeling, fixed by (seed, k)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(k),)))


def resample_labels(e: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    for _ in range(MAX_REDRAWS):
        zt = (rng.random(e.shape[0]) < e).astype(np.int64)
        if 2 <= zt.sum() <= e.shape[0] - 2:
            return zt
    raise DegenerateInputError(f"resampled labels degenerate after {MAX_REDRAWS} redraws")


def kcd_test(data: Dataset, k_spec: KernelSpec, l_spec: KernelSpec, lambda0: float | None = None,
             lambda1: float | None = None, m: int = 100, alpha: float = 0.05, seed: int = 0,
             propensity="klr", klr_ridge: float = DEFAULT_KLR_RIDGE, clip_eps: float = DEFAULT_CLIP,
             n_jobs: int | None = None) -> KcdTestResult:
    """Permutation test of ``P(Y0 | X) == P(Y1 | X)``.

    ``propensity`` is ``"klr"`` (kernel logistic regression on the covariates)
    or a vector of known assignment probabilities, one per unit.
    """
    if int(m) < 1:
        raise ArgumentError(f"number of permutations must be >= 1, got {m}")
    if not 0 < alpha < 1:
        raise ArgumentError(f"alpha must lie in (0, 1), got {alpha}")
    data.require_both_groups()
    lam0, lam1 = _default_lambdas(data.z, lambda0, lambda1)
    pooled = PooledKernels(data.X, data.y, k_spec, l_spec)
    t_hat = pooled.statistic(data.z, lam0, lam1)

    extra = {}
    if isinstance(propensity, str):
        if propensity != "klr":
            raise ArgumentError(f"unknown propensity mode {propensity!r}")
        model = fit_propensity_klr(data.X, data.z, k_spec, ridge=klr_ridge, clip_eps=clip_eps)
        e = model.predict(data.X)
        label = "klr"
        extra["klr_converged"] = model.converged
    else:
        e = np.asarray(propensity, dtype=float).ravel()
        if e.shape[0] != data.n:
            raise ArgumentError(f"propensity vector has {e.shape[0]} entries for {data.n} units")
        if not np.all((e > 0) & (e < 1)):
            raise ArgumentError("known propensities must lie strictly inside (0, 1)")
        label = "known"

    def one(k):
        return pooled.statistic(resample_labels(e, permutation_rng(seed, k)), lam0, lam1)

    jobs = thread_count(n_jobs)
    if jobs == 1:
        null = [one(k) for k in range(1, m + 1)]
    else:
        with ThreadPoolExecutor(jobs) as ex:
            null = list(ex.map(one, range(1, m + 1)))
    p = p_value(t_hat, null)
    return KcdTestResult(t_hat, null, p, float(alpha), bool(p < alpha), int(m), int(seed), lam0, lam1, label, extra)
