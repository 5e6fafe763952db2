"""Conditional mean embeddings, MMD-based CoDiTE and conditional witness functions.

The embedding of ``P(Y | X = x)`` estimated from a sample ``(X_i, Y_i)`` is
``sum_i alpha_i(x) l(Y_i, .)`` with ``alpha(x) = (K + n lam I)^{-1} k(x)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .kernels import KernelSpec, as_points, gram
from .solvers import SpdFactor, spd_factor

RIDGE_FLOOR = 1e-10


def default_lambda(n: int) -> float:
    """n^(-1/4): decays, but more slowly than n^(-1/2)."""
    return float(n) ** -0.25


def effective_ridge(K: np.ndarray, lam: float) -> float:
    n = K.shape[0]
    return max(n * lam, RIDGE_FLOOR * float(np.trace(K)))


def _as_outcomes(Y, name="Y") -> np.ndarray:
    y = np.asarray(Y, dtype=float).ravel()
    if not np.all(np.isfinite(y)):
        raise ArgumentError(f"{name} contains non-finite values")
    return y


@dataclass(frozen=True)
class CmeModel:
    group: str
    k_spec: KernelSpec
    l_spec: KernelSpec
    X_train: np.ndarray
    Y_train: np.ndarray
    gram_factor: SpdFactor
    lam: float

    @property
    def n(self) -> int:
        return self.X_train.shape[0]

    def _query(self, Xq) -> np.ndarray:
        Xq = as_points(Xq, "x")
        if Xq.shape[1] != self.X_train.shape[1]:
            raise ArgumentError(f"query dimension {Xq.shape[1]} != training dimension {self.X_train.shape[1]}")
        return Xq

    def weights(self, Xq) -> np.ndarray:
        """Embedding weights, one column per query point (shape n x q)."""
        Xq = self._query(Xq)
        return self.gram_factor.solve(gram(self.k_spec, self.X_train, Xq))

    def weight(self, x) -> np.ndarray:
        """Embedding weight vector at a single point."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        return self.weights(x[None, :])[:, 0]

    def evaluate(self, x, y) -> float:
        """mu_hat(x) evaluated at outcome y."""
        a = self.weight(x)
        ly = np.ascontiguousarray(gram(self.l_spec, self.Y_train, [y])[:, 0])
        return float(np.dot(a, ly))


def fit_cme(X, Y, k_spec: KernelSpec, l_spec: KernelSpec, lam: float | None = None, group: str = "control") -> CmeModel:
    X = as_points(X, "X")
    Y = _as_outcomes(Y)
    n = X.shape[0]
    if n == 0:
        raise ArgumentError("cannot fit a conditional mean embedding on an empty sample")
    if Y.shape[0] != n:
        raise ArgumentError(f"X has {n} rows but Y has {Y.shape[0]} entries")
    lam = default_lambda(n) if lam is None else float(lam)
    if not lam > 0:
        raise ArgumentError(f"lambda must be positive, got {lam!r}")
    K = gram(k_spec, X)
    factor = spd_factor(K, effective_ridge(K, lam))
    return CmeModel(group, k_spec, l_spec, X, Y, factor, lam)


def _check_pair(m0: CmeModel, m1: CmeModel):
    if m0.l_spec != m1.l_spec:
        raise ArgumentError(f"outcome kernels differ: {m0.l_spec} vs {m1.l_spec}")
    if m0.X_train.shape[1] != m1.X_train.shape[1]:
        raise ArgumentError("models were fitted on covariates of different dimension")


def codite_mmd_squared(m0: CmeModel, m1: CmeModel, Xq) -> np.ndarray:
    """Unclamped squared RKHS distance between the two embeddings, per query row."""
    _check_pair(m0, m1)
    A0 = m0.weights(Xq)
    A1 = m1.weights(Xq)
    L0 = gram(m0.l_spec, m0.Y_train)
    L1 = gram(m0.l_spec, m1.Y_train)
    L = gram(m0.l_spec, m0.Y_train, m1.Y_train)
    return (
        np.sum(A0 * (L0 @ A0), axis=0)
        - 2.0 * np.sum(A0 * (L @ A1), axis=0)
        + np.sum(A1 * (L1 @ A1), axis=0)
    )


def codite_mmd_batch(m0: CmeModel, m1: CmeModel, Xq) -> np.ndarray:
    return np.sqrt(np.maximum(codite_mmd_squared(m0, m1, Xq), 0.0))


def codite_mmd(m0: CmeModel, m1: CmeModel, x) -> float:
    """Estimated MMD between the treated and control conditional laws at x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(codite_mmd_batch(m0, m1, x[None, :])[0])


def _witness_row(m0: CmeModel, m1: CmeModel, x, G0T: np.ndarray, G1T: np.ndarray) -> np.ndarray:
    a0 = m0.weight(x)
    a1 = m1.weight(x)
    return np.array([np.dot(a1, G1T[j]) - np.dot(a0, G0T[j]) for j in range(G0T.shape[0])])


def witness(m0: CmeModel, m1: CmeModel, x, y) -> float:
    """mu_hat_1(x)(y) - mu_hat_0(x)(y); positive where treated outcomes are denser."""
    _check_pair(m0, m1)
    yq = np.array([float(y)])
    G0T = np.ascontiguousarray(gram(m0.l_spec, m0.Y_train, yq).T)
    G1T = np.ascontiguousarray(gram(m1.l_spec, m1.Y_train, yq).T)
    return float(_witness_row(m0, m1, x, G0T, G1T)[0])


@dataclass(frozen=True)
class WitnessGrid:
    x_grid: np.ndarray
    y_grid: np.ndarray
    values: np.ndarray

    def to_csv(self, x_names=None) -> str:
        d = self.x_grid.shape[1]
        if x_names is None:
            x_names = ["x"] if d == 1 else [f"x{k}" for k in range(d)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x_index", "y_index", *x_names, "y", "value"])
        for i, xrow in enumerate(self.x_grid):
            for j, yv in enumerate(self.y_grid):
                w.writerow([i, j, *(repr(float(v)) for v in xrow), repr(float(yv)), repr(float(self.values[i, j]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "x_grid": self.x_grid.tolist(),
            "y_grid": self.y_grid.tolist(),
            "values": self.values.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def witness_grid(m0: CmeModel, m1: CmeModel, x_grid, y_grid) -> WitnessGrid:
    _check_pair(m0, m1)
    Xg = m0._query(x_grid)
    yg = _as_outcomes(y_grid, "y_grid")
    if Xg.shape[0] == 0 or yg.shape[0] == 0:
        raise ArgumentError("witness grid needs at least one x and one y")
    G0T = np.ascontiguousarray(gram(m0.l_spec, m0.Y_train, yg).T)
    G1T = np.ascontiguousarray(gram(m1.l_spec, m1.Y_train, yg).T)
    values = np.vstack([_witness_row(m0, m1, x, G0T, G1T) for x in Xg])
    return WitnessGrid(Xg, yg, values)


def _heldout_losses(X, Y, k_spec, l_spec, grid, folds) -> np.ndarray:
    n = X.shape[0]
    fold_of = np.arange(n) % folds
    losses = np.zeros(len(grid))
    for f in range(folds):
        tr, te = fold_of != f, fold_of == f
        if not tr.any() or not te.any():
            raise ArgumentError(f"fold {f} is empty; n={n} is too small for {folds} folds")
        Xtr, Ytr = X[tr], Y[tr]
        K = gram(k_spec, Xtr)
        Kq = gram(k_spec, Xtr, X[te])
        Ltr = gram(l_spec, Ytr)
        Lq = gram(l_spec, Ytr, Y[te])
        self_term = np.diag(gram(l_spec, Y[te]))
        for g, lam in enumerate(grid):
            A = spd_factor(K, effective_ridge(K, lam)).solve(Kq)
            loss = self_term - 2.0 * np.sum(A * Lq, axis=0) + np.sum(A * (Ltr @ A), axis=0)
            losses[g] += loss.sum()
    return losses / n


def cv_losses(X, Y, k_spec: KernelSpec, l_spec: KernelSpec, grid, folds: int = 5) -> np.ndarray:
    """Mean held-out embedding loss ||l(y_j, .) - mu_hat(x_j)||^2 for each grid value."""
    X = as_points(X, "X")
    Y = _as_outcomes(Y)
    grid = [float(g) for g in grid]
    if not grid:
        raise ArgumentError("lambda grid is empty")
    if any(not g > 0 for g in grid):
        raise ArgumentError("lambda grid values must be positive")
    if folds < 2:
        raise ArgumentError(f"need at least 2 folds, got {folds}")
    return _heldout_losses(X, Y, k_spec, l_spec, grid, folds)


def select_lambda(X, Y, k_spec: KernelSpec, l_spec: KernelSpec, grid, folds: int = 5) -> float:
    """K-fold choice of the ridge weight; ties go to the larger value."""
    grid = [float(g) for g in grid]
    losses = cv_losses(X, Y, k_spec, l_spec, grid, folds)
    best = None
    for g in sorted(range(len(grid)), key=lambda i: -grid[i]):
        if best is None or losses[g] < losses[best]:
            best = g
    return grid[best]
