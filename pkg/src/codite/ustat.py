"""U-statistic regression by generalized kernel ridge regression.

For a symmetric U-kernel ``h`` of arity r the conditional functional
``F(x_1, ..., x_r) = E[h(Y_1, ..., Y_r) | X_1 = x_1, ..., X_r = x_r]`` is fitted
in the RKHS of the product kernel ``k(x_1, x'_1) ... k(x_r, x'_r)``. The
coefficients solve, over all n^r index tuples,

    sum_j (prod_t k(x_{i_t}, x_{j_t}) + binom(n, r) lam prod_t delta_{i_t j_t}) c_j = h(y_{i_1}, ..., y_{i_r}).

Conditional quantities at a single covariate value are read off the diagonal
``F(x, ..., x)``. A Nadaraya-Watson conditional U-statistic is provided as a
baseline.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import ArgumentError
from .kernels import KernelSpec, as_points, gram, median_heuristic
from .solvers import kron_ridge_solve, spd_solve, sym_eigen, ustat_ridge

UKERNEL_NAMES = ("mean", "variance", "gini", "cdf_at", "raw_moment")


@dataclass(frozen=True)
class UStatKernel:
    name: str
    r: int
    param: float | None = None

    def __post_init__(self):
        if self.name not in UKERNEL_NAMES:
            raise ArgumentError(f"unknown U-kernel {self.name!r}; expected one of {UKERNEL_NAMES}")

    def vectorized(self, *ys):
        """Evaluate on broadcastable arrays, one per argument."""
        if len(ys) != self.r:
            raise ArgumentError(f"{self.name} kernel takes {self.r} arguments, got {len(ys)}")
        if self.name == "mean":
            return np.asarray(ys[0], dtype=float)
        if self.name == "cdf_at":
            return (np.asarray(ys[0]) <= self.param).astype(float)
        if self.name == "raw_moment":
            return np.asarray(ys[0], dtype=float) ** int(self.param)
        d = np.asarray(ys[0], dtype=float) - np.asarray(ys[1], dtype=float)
        if self.name == "variance":
            return 0.5 * d * d
        return np.abs(d)

    def __call__(self, *ys) -> float:
        return float(self.vectorized(*(float(y) for y in ys)))

    @property
    def label(self) -> str:
        if self.name == "cdf_at":
            return f"cdf_at({self.param:g})"
        if self.name == "raw_moment":
            return f"raw_moment({int(self.param)})"
        return self.name


def ukernel(name: str, param=None) -> UStatKernel:
    if name in ("mean", "cdf_at", "raw_moment"):
        r = 1
    elif name in ("variance", "gini"):
        r = 2
    else:
        raise ArgumentError(f"unknown U-kernel {name!r}; expected one of {UKERNEL_NAMES}")
    if name == "cdf_at":
        if param is None or not math.isfinite(float(param)):
            raise ArgumentError("cdf_at needs a finite threshold")
        param = float(param)
    elif name == "raw_moment":
        if param is None or int(param) != param or int(param) < 1:
            raise ArgumentError(f"raw_moment needs a positive integer order, got {param!r}")
        param = int(param)
    else:
        param = None
    return UStatKernel(name, r, param)


MEAN = UStatKernel("mean", 1)
VARIANCE = UStatKernel("variance", 2)
GINI = UStatKernel("gini", 2)


def ukernel_eval(h: UStatKernel, ys) -> float:
    ys = list(np.atleast_1d(np.asarray(ys, dtype=float)))
    if len(ys) != h.r:
        raise ArgumentError(f"{h.name} kernel has arity {h.r}, got a tuple of length {len(ys)}")
    return h(*ys)


def tuple_targets(h: UStatKernel, Y) -> np.ndarray:
    """h evaluated on every ordered index tuple, as an n x ... x n array."""
    Y = np.asarray(Y, dtype=float).ravel()
    n = Y.shape[0]
    axes = [Y.reshape(tuple(n if a == t else 1 for a in range(h.r))) for t in range(h.r)]
    return np.broadcast_to(h.vectorized(*axes), (n,) * h.r).astype(float)


@dataclass(frozen=True)
class UStatModel:
    h: UStatKernel
    k_spec: KernelSpec
    X_train: np.ndarray
    lam: float
    coef: np.ndarray

    @property
    def n(self) -> int:
        return self.X_train.shape[0]

    @property
    def r(self) -> int:
        return self.h.r

    @property
    def C(self) -> np.ndarray:
        return self.coef.reshape((self.n,) * self.r)

    @property
    def ridge(self) -> float:
        return ustat_ridge(self.n, self.r, self.lam)

    def features(self, Xq) -> np.ndarray:
        Xq = as_points(Xq, "x")
        if Xq.shape[1] != self.X_train.shape[1]:
            raise ArgumentError(f"query dimension {Xq.shape[1]} != training dimension {self.X_train.shape[1]}")
        return gram(self.k_spec, self.X_train, Xq)

    def predict_diagonal(self, Xq) -> np.ndarray:
        """F_hat(x, ..., x) for each query row."""
        Kq = self.features(Xq)
        if self.r == 1:
            return self.coef @ Kq
        if self.r == 2:
            return np.sum(Kq * (self.C @ Kq), axis=0)
        return np.array([predict_ustat(self, [x] * self.r) for x in as_points(Xq)])

    def predict_pairs(self, X1, X2) -> np.ndarray:
        """F_hat over the full grid X1 x X2 (r = 2 only)."""
        if self.r != 2:
            raise ArgumentError("predict_pairs needs a pairwise kernel")
        return self.features(X1).T @ self.C @ self.features(X2)


def fit_ustat_regression(X, Y, h: UStatKernel, k_spec: KernelSpec, lam: float | None = None) -> UStatModel:
    X = as_points(X, "X")
    Y = np.asarray(Y, dtype=float).ravel()
    n = X.shape[0]
    if Y.shape[0] != n:
        raise ArgumentError(f"X has {n} rows but Y has {Y.shape[0]} entries")
    if not np.all(np.isfinite(Y)):
        raise ArgumentError("Y contains non-finite values")
    if n < h.r:
        raise ArgumentError(f"need n >= r, got n={n}, r={h.r}")
    lam = default_lambda(n) if lam is None else float(lam)
    if not lam > 0:
        raise ArgumentError(f"lambda must be positive, got {lam!r}")
    K = gram(k_spec, X)
    rhs = tuple_targets(h, Y).ravel()
    ridge = ustat_ridge(n, h.r, lam)
    if h.r == 1:
        coef = spd_solve(K, ridge, rhs)
    else:
        coef = kron_ridge_solve(K, ridge, rhs, r=h.r)
    return UStatModel(h, k_spec, X, lam, coef)


def default_lambda(n: int) -> float:
    return float(n) ** -0.25


def predict_ustat(model: UStatModel, x_tuple) -> float:
    """Kernel expansion of F_hat at one r-tuple of covariate points."""
    pts = list(x_tuple)
    if len(pts) != model.r:
        raise ArgumentError(f"model has arity {model.r}, got a tuple of {len(pts)} points")
    feats = [model.features(np.atleast_1d(np.asarray(p, dtype=float))[None, :])[:, 0] for p in pts]
    T = model.C
    for f in reversed(feats):
        T = T @ f
    return float(T)


def conditional_std_batch(model: UStatModel, Xq) -> tuple[np.ndarray, int]:
    """sqrt of the diagonal variance prediction, clamped at 0; returns (std, number clamped)."""
    if model.h.name != "variance":
        raise ArgumentError(f"conditional std needs a variance-kernel model, got {model.h.name!r}")
    v = model.predict_diagonal(Xq)
    clamped = int(np.sum(v < 0))
    return np.sqrt(np.maximum(v, 0.0)), clamped


def conditional_std(model: UStatModel, x, return_flag: bool = False):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    std, clamped = conditional_std_batch(model, x[None, :])
    if clamped:
        warnings.warn("negative variance prediction clamped to 0", RuntimeWarning, stacklevel=2)
    if return_flag:
        return float(std[0]), bool(clamped)
    return float(std[0])


def standardized_cate_components(m_mean0: UStatModel, m_mean1: UStatModel, m_var0: UStatModel, m_var1: UStatModel, x) -> dict:
    """Numerator and denominator pieces of the standardized CATE, unformed."""
    for m, role in ((m_mean0, "mean"), (m_mean1, "mean"), (m_var0, "variance"), (m_var1, "variance")):
        if m.h.name != role:
            raise ArgumentError(f"expected a {role} model, got {m.h.name!r}")
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    return {
        "mean0": float(m_mean0.predict_diagonal(x)[0]),
        "mean1": float(m_mean1.predict_diagonal(x)[0]),
        "var0": float(m_var0.predict_diagonal(x)[0]),
        "var1": float(m_var1.predict_diagonal(x)[0]),
    }


def empirical_risk(model: UStatModel, Y, coef=None) -> float:
    """Regularized risk over distinct r-combinations plus lam * ||F||^2."""
    Y = np.asarray(Y, dtype=float).ravel()
    c = model.coef if coef is None else np.asarray(coef, dtype=float)
    n, r = model.n, model.r
    K = gram(model.k_spec, model.X_train)
    if r == 1:
        F = K @ c
        norm2 = c @ F
        resid = F - model.h.vectorized(Y)
        return float(np.mean(resid**2) + model.lam * norm2)
    if r != 2:
        raise ArgumentError("empirical_risk implemented for r <= 2")
    C = c.reshape(n, n)
    F = K @ C @ K
    norm2 = float(np.sum(C * F))
    H = tuple_targets(model.h, Y)
    iu = np.triu_indices(n, 1)
    return float(np.sum((F[iu] - H[iu]) ** 2) / comb(n, 2) + model.lam * norm2)


# --- hyperparameter selection --------------------------------------------------


def _pair_losses_r2(K, H, tr, te, grid_ridge):
    Ktr = K[np.ix_(tr, tr)]
    Kq = K[np.ix_(tr, te)]
    w, V = sym_eigen(Ktr)
    S = V.T @ H[np.ix_(tr, tr)] @ V
    B = V.T @ Kq
    Hte = H[np.ix_(te, te)]
    iu = np.triu_indices(len(te), 1)
    ww = np.outer(w, w)
    out = []
    for ridge in grid_ridge:
        P = B.T @ (S / (ww + ridge)) @ B
        out.append(np.sum((P[iu] - Hte[iu]) ** 2))
    return np.array(out), len(iu[0])


def ustat_cv_losses(X, Y, h: UStatKernel, k_spec: KernelSpec, grid, folds: int = 5) -> np.ndarray:
    """Mean held-out squared error of F_hat over distinct held-out tuples, per lambda."""
    X = as_points(X, "X")
    Y = np.asarray(Y, dtype=float).ravel()
    grid = [float(g) for g in grid]
    if not grid or any(not g > 0 for g in grid):
        raise ArgumentError("lambda grid must be non-empty and positive")
    if folds < 2:
        raise ArgumentError(f"need at least 2 folds, got {folds}")
    if h.r > 2:
        raise ArgumentError("cross-validation implemented for r <= 2")
    n = X.shape[0]
    fold_of = np.arange(n) % folds
    K = gram(k_spec, X)
    total = np.zeros(len(grid))
    count = 0
    for f in range(folds):
        tr = np.flatnonzero(fold_of != f)
        te = np.flatnonzero(fold_of == f)
        if len(tr) < h.r or len(te) < h.r:
            raise ArgumentError(f"fold {f} too small for arity {h.r}")
        ridges = [ustat_ridge(len(tr), h.r, g) for g in grid]
        if h.r == 1:
            target = h.vectorized(Y)
            for g, ridge in enumerate(ridges):
                c = spd_solve(K[np.ix_(tr, tr)], ridge, target[tr])
                total[g] += np.sum((K[np.ix_(te, tr)] @ c - target[te]) ** 2)
            count += len(te)
        else:
            losses, m = _pair_losses_r2(K, tuple_targets(h, Y), tr, te, ridges)
            total += losses
            count += m
    return total / count


def select_ustat_lambda(X, Y, h: UStatKernel, k_spec: KernelSpec, grid, folds: int = 5) -> float:
    """K-fold choice of lambda for U-statistic regression; ties go to the larger value."""
    grid = [float(g) for g in grid]
    losses = ustat_cv_losses(X, Y, h, k_spec, grid, folds)
    order = sorted(range(len(grid)), key=lambda i: -grid[i])
    best = order[0]
    for g in order[1:]:
        if losses[g] < losses[best]:
            best = g
    return grid[best]


DEFAULT_LAMBDA_GRID = tuple(10.0**e for e in range(-7, 0))
DEFAULT_BANDWIDTH_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0)


def select_ustat_hyperparameters(X, Y, h: UStatKernel, family: str = "gaussian", base_bandwidth: float | None = None,
                                 multipliers=DEFAULT_BANDWIDTH_MULTIPLIERS, grid=DEFAULT_LAMBDA_GRID,
                                 folds: int = 5) -> tuple[KernelSpec, float]:
    """Joint K-fold choice of covariate bandwidth (multiples of the median heuristic) and lambda."""
    base = median_heuristic(X) if base_bandwidth is None else float(base_bandwidth)
    best = None
    for mult in multipliers:
        spec = KernelSpec(family, base * mult)
        losses = ustat_cv_losses(X, Y, h, spec, grid, folds)
        for g in sorted(range(len(grid)), key=lambda i: -grid[i]):
            if best is None or losses[g] < best[0]:
                best = (losses[g], spec, float(grid[g]))
    return best[1], best[2]


# --- Nadaraya-Watson baseline ------------------------------------------------


def smoothing_weights(name: str, U: np.ndarray) -> np.ndarray:
    """Smoothing-kernel density at the rows of U (already divided by the bandwidth)."""
    d = U.shape[-1]
    sq = np.sum(U * U, axis=-1)
    if name == "gaussian":
        return np.exp(-0.5 * sq) / (2 * math.pi) ** (d / 2)
    if name == "epanechnikov":
        return np.maximum(1.0 - sq, 0.0)
    raise ArgumentError(f"unknown smoothing kernel {name!r}")


def default_nw_bandwidth(X) -> float:
    X = as_points(X, "X")
    n, d = X.shape
    return median_heuristic(X) * n ** (-1.0 / (4 + d))


NW_DENOMINATOR_FLOOR = 1e-12


def nw_conditional_ustat(X, Y, h: UStatKernel, smoothing: str = "gaussian", bandwidth: float | None = None, x_tuple=None):
    """Nadaraya-Watson conditional U-statistic at one r-tuple.

    Sums run over r-combinations ``i_1 < ... < i_r`` with the j-th query point
    weighted against ``X[i_j]``. Returns None when the total weight is below
    1e-12 (estimate not defined there).
    """
    X = as_points(X, "X")
    Y = np.asarray(Y, dtype=float).ravel()
    n = X.shape[0]
    if n < h.r:
        raise ArgumentError(f"need n >= r, got n={n}, r={h.r}")
    a = default_nw_bandwidth(X) if bandwidth is None else float(bandwidth)
    if not a > 0:
        raise ArgumentError(f"bandwidth must be positive, got {bandwidth!r}")
    pts = [np.atleast_1d(np.asarray(p, dtype=float)) for p in x_tuple]
    if len(pts) != h.r:
        raise ArgumentError(f"kernel has arity {h.r}, got a tuple of {len(pts)} points")
    W = [smoothing_weights(smoothing, (p[None, :] - X) / a) for p in pts]
    if h.r == 1:
        num = float(np.sum(h.vectorized(Y) * W[0]))
        den = float(np.sum(W[0]))
    elif h.r == 2:
        iu = np.triu_indices(n, 1)
        prod = W[0][iu[0]] * W[1][iu[1]]
        num = float(np.sum(h.vectorized(Y[iu[0]], Y[iu[1]]) * prod))
        den = float(np.sum(prod))
    else:
        num = den = 0.0
        for idx in itertools.combinations(range(n), h.r):
            wgt = math.prod(W[j][i] for j, i in enumerate(idx))
            num += h(*Y[list(idx)]) * wgt
            den += wgt
    if den < NW_DENOMINATOR_FLOOR:
        return None
    return num / den
