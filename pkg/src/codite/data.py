"""Observational datasets, synthetic generators with ground truth, and error metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import ArgumentError, DegenerateInputError, ParseError, SchemaError
from .kernels import KernelSpec, as_points

TOY_COLUMNS = ("x",)
IHDP_BETA_VALUES = (0.0, 0.1, 0.2, 0.3, 0.4)
IHDP_CONT_PROBS = (0.5, 0.125, 0.125, 0.125, 0.125)
IHDP_BIN_PROBS = (0.6, 0.1, 0.1, 0.1, 0.1)
IHDP_SD_SMALL = 1.0
IHDP_SD_LARGE = 20.0
IHDP_EFFECT = 4.0
IHDP_SETTINGS = ("SN", "LN", "HN")


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    z: np.ndarray
    y: np.ndarray
    covariate_names: tuple = ()

    def __post_init__(self):
        X = as_points(self.X, "X")
        z = np.asarray(self.z).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if not (X.shape[0] == z.shape[0] == y.shape[0]):
            raise ArgumentError(f"inconsistent lengths: X {X.shape[0]}, z {z.shape[0]}, y {y.shape[0]}")
        if not np.all(np.isfinite(y)):
            raise ArgumentError("y contains non-finite values")
        if z.size and not np.all(np.isin(z, (0, 1))):
            raise ArgumentError("treatment vector must contain only 0 and 1")
        names = tuple(self.covariate_names) or default_covariate_names(X.shape[1])
        if len(names) != X.shape[1]:
            raise ArgumentError(f"{len(names)} covariate names for {X.shape[1]} columns")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "z", z.astype(np.int64))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n0(self) -> int:
        return int(np.sum(self.z == 0))

    @property
    def n1(self) -> int:
        return int(np.sum(self.z == 1))

    def group(self, g: int):
        mask = self.z == g
        return self.X[mask], self.y[mask]

    def require_both_groups(self):
        if self.n0 == 0 or self.n1 == 0:
            raise DegenerateInputError(f"both treatment groups must be present (n0={self.n0}, n1={self.n1})")


def default_covariate_names(d: int) -> tuple:
    return ("x",) if d == 1 else tuple(f"x{k + 1}" for k in range(d))


def toy_std(x):
    """Conditional noise scale of the toy law: 1 below 0.3, 7(1 + (x - 0.3)) above."""
    x = np.asarray(x, dtype=float)
    return np.where(x < 0.3, 1.0, 7.0 * (1.0 + (x - 0.3)))


@dataclass(frozen=True)
class SyntheticTruth:
    """Closed-form conditional moments of a synthetic generator.

    Both generators produce Gaussian conditional laws ``Y_g | X = x`` with
    mean ``cond_mean{g}(x)`` and standard deviation ``cond_std{g}(x)``.
    """

    generator: str
    meta: dict = field(default_factory=dict)

    def _first(self, X) -> np.ndarray:
        return as_points(X)[:, 0]

    def _linear(self, X) -> np.ndarray:
        P = as_points(X)
        beta = np.asarray(self.meta["beta"], dtype=float)
        if P.shape[1] != beta.shape[0]:
            raise ArgumentError(f"expected {beta.shape[0]} covariates, got {P.shape[1]}")
        return P @ beta

    def _out(self, X, v):
        return float(v[0]) if np.ndim(X) == 0 or (np.ndim(X) == 1 and self.dim > 1) else v

    @property
    def dim(self) -> int:
        return 1 if self.generator == "toy" else len(self.meta["beta"])

    def _pts(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1 and self.dim > 1:
            X = X[None, :]
        return X

    def cond_mean0(self, X):
        P = self._pts(X)
        v = 3.0 + 5.0 * self._first(P) if self.generator == "toy" else self._linear(P)
        return self._out(X, v)

    def cond_mean1(self, X):
        P = self._pts(X)
        v = 4.0 * self._first(P) if self.generator == "toy" else self._linear(P) + IHDP_EFFECT
        return self._out(X, v)

    def cond_std0(self, X):
        P = self._pts(X)
        if self.generator == "toy":
            v = toy_std(self._first(P))
        else:
            P = as_points(P)
            setting = self.meta["setting"]
            if setting == "SN":
                v = np.full(P.shape[0], IHDP_SD_SMALL)
            elif setting == "LN":
                v = np.full(P.shape[0], IHDP_SD_LARGE)
            else:
                x6 = P[:, self.meta["hn_column"]]
                v = np.where(x6 == 1, IHDP_SD_SMALL, IHDP_SD_LARGE)
        return self._out(X, np.asarray(v, dtype=float))

    def cond_std1(self, X):
        return self.cond_std0(X)

    def cate(self, X):
        m1 = np.asarray(self.cond_mean1(X))
        m0 = np.asarray(self.cond_mean0(X))
        d = m1 - m0
        return float(d) if d.ndim == 0 else d

    def cond_mean(self, group: int, X):
        return self.cond_mean1(X) if group == 1 else self.cond_mean0(X)

    def cond_std(self, group: int, X):
        return self.cond_std1(X) if group == 1 else self.cond_std0(X)

    def to_dict(self) -> dict:
        return {"generator": self.generator, **self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTruth":
        d = dict(d)
        gen = d.pop("generator")
        return cls(gen, d)


@dataclass(frozen=True)
class SyntheticDataset:
    base: Dataset
    y0: np.ndarray
    y1: np.ndarray
    truth: SyntheticTruth

    def __post_init__(self):
        z = self.base.z
        if not np.array_equal(self.base.y, np.where(z == 1, self.y1, self.y0)):
            raise ArgumentError("observed outcome is not y0 (1 - z) + y1 z")


def _assign(rng, X1d_score, propensity):
    if isinstance(propensity, str):
        if propensity != "logistic":
            raise ArgumentError(f"unknown propensity mode {propensity!r}")
        e = expit(X1d_score)
    else:
        p = float(propensity)
        if not 0 < p < 1:
            raise ArgumentError(f"propensity must lie in (0, 1), got {p}")
        e = np.full(X1d_score.shape[0], p)
    return (rng.random(e.shape[0]) < e).astype(np.int64)


def gen_toy(n: int, propensity=0.5, seed: int = 0) -> SyntheticDataset:
    """Uniform covariate on [0, 1] with heteroscedastic Gaussian outcomes.

    ``Y0 = 3 + 5X + s(X) N`` and ``Y1 = 4X + s(X) N`` share one noise draw N.
    ``propensity`` is a constant probability or ``"logistic"`` for
    ``e(x) = expit(4x - 2)``.
    """
    if n < 2:
        raise ArgumentError(f"n must be at least 2, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=n)
    noise = rng.standard_normal(n)
    s = toy_std(x)
    y0 = 3.0 + 5.0 * x + s * noise
    y1 = 4.0 * x + s * noise
    z = _assign(rng, 4.0 * x - 2.0, propensity)
    y = np.where(z == 1, y1, y0)
    truth = SyntheticTruth("toy", {"seed": int(seed), "n": int(n), "propensity": propensity})
    return SyntheticDataset(Dataset(x[:, None], z, y, TOY_COLUMNS), y0, y1, truth)


def gen_ihdp_like(n: int, d: int = 25, n_continuous: int = 6, setting: str = "SN", seed: int = 0, propensity=0.5) -> SyntheticDataset:
    """Parallel linear response surfaces with effect 4 and SN/LN/HN noise.

    Covariates are a stand-in law: ``n_continuous`` standard normals followed by
    Bernoulli(0.5) binaries. The heterogeneous-noise switch is the first binary
    column (0-based index ``n_continuous``).
    """
    if n < 10:
        raise ArgumentError(f"n must be at least 10, got {n}")
    if setting not in IHDP_SETTINGS:
        raise ArgumentError(f"setting must be one of {IHDP_SETTINGS}, got {setting!r}")
    if not 0 < n_continuous < d:
        raise ArgumentError(f"need 0 < n_continuous < d, got {n_continuous}, {d}")
    rng = np.random.default_rng(seed)
    n_bin = d - n_continuous
    beta = np.concatenate([
        rng.choice(IHDP_BETA_VALUES, size=n_continuous, p=IHDP_CONT_PROBS),
        rng.choice(IHDP_BETA_VALUES, size=n_bin, p=IHDP_BIN_PROBS),
    ])
    X = np.hstack([
        rng.standard_normal((n, n_continuous)),
        (rng.random((n, n_bin)) < 0.5).astype(float),
    ])
    eps_small = IHDP_SD_SMALL * rng.standard_normal(n)
    eps_large = IHDP_SD_LARGE * rng.standard_normal(n)
    if setting == "SN":
        eps = eps_small
    elif setting == "LN":
        eps = eps_large
    else:
        switch = X[:, n_continuous]
        eps = switch * eps_small + (1.0 - switch) * eps_large
    mean0 = X @ beta
    y0 = mean0 + eps
    y1 = mean0 + IHDP_EFFECT + eps
    z = _assign(rng, 0.5 * X[:, 0], propensity)
    y = np.where(z == 1, y1, y0)
    truth = SyntheticTruth("ihdp", {
        "seed": int(seed), "n": int(n), "setting": setting, "beta": beta.tolist(),
        "n_continuous": int(n_continuous), "hn_column": int(n_continuous), "propensity": propensity,
    })
    return SyntheticDataset(Dataset(X, z, y), y0, y1, truth)


def generate(generator: str, n: int, seed: int, **kwargs) -> SyntheticDataset:
    if generator == "toy":
        return gen_toy(n, seed=seed, **kwargs)
    if generator == "ihdp":
        return gen_ihdp_like(n, seed=seed, **kwargs)
    raise ArgumentError(f"unknown generator {generator!r}; expected 'toy' or 'ihdp'")


# --- true conditional quantities -------------------------------------------

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(120)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


def gaussian_expectation(fn, mean, std) -> np.ndarray:
    """E[fn(V)] for V ~ N(mean, std^2) by Gauss-Hermite quadrature (elementwise in mean/std)."""
    mean = np.asarray(mean, dtype=float)[..., None]
    std = np.asarray(std, dtype=float)[..., None]
    return np.sum(fn(mean + std * _GH_NODES) * _GH_WEIGHTS, axis=-1)


def _expected_kernel(l_spec: KernelSpec, mean_diff, var_sum):
    sd = np.sqrt(var_sum)
    if l_spec.family == "gaussian":
        f = lambda d: np.exp(-(d * d) / l_spec.bandwidth**2)
    elif l_spec.family == "laplacian":
        f = lambda d: np.exp(-np.abs(d) / l_spec.bandwidth**2)
    else:
        raise ArgumentError("true MMD needs a bounded outcome kernel")
    return gaussian_expectation(f, mean_diff, sd)


def true_mmd(truth: SyntheticTruth, l_spec: KernelSpec, X) -> np.ndarray:
    """MMD between the true conditional laws at each covariate row, by quadrature."""
    m0 = np.atleast_1d(truth.cond_mean0(X))
    m1 = np.atleast_1d(truth.cond_mean1(X))
    v0 = np.atleast_1d(truth.cond_std0(X)) ** 2
    v1 = np.atleast_1d(truth.cond_std1(X)) ** 2
    e00 = _expected_kernel(l_spec, 0.0 * m0, 2 * v0)
    e11 = _expected_kernel(l_spec, 0.0 * m1, 2 * v1)
    e01 = _expected_kernel(l_spec, m0 - m1, v0 + v1)
    return np.sqrt(np.maximum(e00 + e11 - 2 * e01, 0.0))


def true_ustat(truth: SyntheticTruth, name: str, group: int, X1, X2=None, param=None) -> np.ndarray:
    """E[h(Y_1, ..., Y_r) | X_1, ..., X_r] under the generator's Gaussian conditional laws."""
    m1 = np.atleast_1d(truth.cond_mean(group, X1))
    s1 = np.atleast_1d(truth.cond_std(group, X1))
    if name == "mean":
        return m1
    if name == "cdf_at":
        return norm.cdf((float(param) - m1) / s1)
    if name == "raw_moment":
        k = int(param)
        return gaussian_expectation(lambda v: v**k, m1, s1)
    X2 = X1 if X2 is None else X2
    m2 = np.atleast_1d(truth.cond_mean(group, X2))
    s2 = np.atleast_1d(truth.cond_std(group, X2))
    if name == "variance":
        return 0.5 * (s1**2 + s2**2 + (m1 - m2) ** 2)
    if name == "gini":
        mu, sd = m1 - m2, np.sqrt(s1**2 + s2**2)
        return sd * math.sqrt(2 / math.pi) * np.exp(-mu**2 / (2 * sd**2)) + mu * (1 - 2 * norm.cdf(-mu / sd))
    raise ArgumentError(f"no closed-form truth for quantity {name!r}")


# --- metrics -----------------------------------------------------------------


def pehde(estimates, truth_values) -> float:
    """Mean squared difference between estimated and true effect values."""
    e = np.asarray(estimates, dtype=float).ravel()
    t = np.asarray(truth_values, dtype=float).ravel()
    if e.shape != t.shape:
        raise ArgumentError(f"length mismatch: {e.shape[0]} estimates vs {t.shape[0]} truth values")
    if e.size == 0:
        raise ArgumentError("need at least one value")
    return float(np.mean((e - t) ** 2))


def rmse(estimates, truth_values) -> float:
    return math.sqrt(pehde(estimates, truth_values))


# --- CSV ---------------------------------------------------------------------


def load_csv(path, covariate_columns=None, treatment_column: str = "z", outcome_column: str = "y") -> Dataset:
    """Read a delimited file into a Dataset.

    ``covariate_columns=None`` takes every column other than the treatment,
    outcome and potential-outcome (y0, y1) columns.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: file is empty") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    reserved = {treatment_column, outcome_column, "y0", "y1"}
    if covariate_columns is None:
        covariate_columns = [h for h in header if h not in reserved]
    covariate_columns = list(covariate_columns)
    for col in [*covariate_columns, treatment_column, outcome_column]:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    if not covariate_columns:
        raise SchemaError(f"{path}: no covariate columns")
    if not rows:
        raise ParseError(f"{path}: no data rows (header only)")
    idx = {h: i for i, h in enumerate(header)}

    def cell(r, lineno, col):
        try:
            raw = r[idx[col]]
        except IndexError:
            raise ParseError(f"{path}: row {lineno}: missing value for column {col!r}") from None
        try:
            v = float(raw)
        except ValueError:
            raise ParseError(f"{path}: row {lineno}, column {col!r}: cannot parse {raw!r} as a number") from None
        if not math.isfinite(v):
            raise ParseError(f"{path}: row {lineno}, column {col!r}: non-finite value {raw!r}")
        return v

    X = np.empty((len(rows), len(covariate_columns)))
    z = np.empty(len(rows), dtype=np.int64)
    y = np.empty(len(rows))
    for i, r in enumerate(rows):
        lineno = i + 2
        for k, col in enumerate(covariate_columns):
            X[i, k] = cell(r, lineno, col)
        t = cell(r, lineno, treatment_column)
        if t not in (0.0, 1.0):
            raise ParseError(f"{path}: row {lineno}, column {treatment_column!r}: treatment must be 0 or 1, got {r[idx[treatment_column]]!r}")
        z[i] = int(t)
        y[i] = cell(r, lineno, outcome_column)
    ds = Dataset(X, z, y, tuple(covariate_columns))
    if ds.n0 == 0 or ds.n1 == 0:
        raise DegenerateInputError(f"{path}: treatment column {treatment_column!r} contains a single class")
    return ds


def dataset_csv_text(ds: Dataset, y0=None, y1=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [*ds.covariate_names, "z", "y"]
    if y0 is not None:
        header += ["y0", "y1"]
    w.writerow(header)
    for i in range(ds.n):
        row = [repr(float(v)) for v in ds.X[i]] + [str(int(ds.z[i])), repr(float(ds.y[i]))]
        if y0 is not None:
            row += [repr(float(y0[i])), repr(float(y1[i]))]
        w.writerow(row)
    return buf.getvalue()


def save_csv(ds: Dataset, path, y0=None, y1=None) -> None:
    Path(path).write_text(dataset_csv_text(ds, y0, y1))


def truth_sidecar(sd: SyntheticDataset) -> dict:
    return {"truth": sd.truth.to_dict(), "covariate_columns": list(sd.base.covariate_names),
            "treatment_column": "z", "outcome_column": "y"}


def load_truth(path) -> SyntheticTruth:
    meta = json.loads(Path(path).read_text())
    if "truth" not in meta:
        raise SchemaError(f"{path}: sidecar has no 'truth' entry")
    return SyntheticTruth.from_dict(meta["truth"])
