"""Scalar positive-definite kernels, Gram assembly and bandwidth selection.

Gaussian:  exp(-||a - b||_2^2 / sigma^2)
Laplacian: exp(-||a - b||_1 / sigma^2)
Linear:    <a, b>

Squared distances are accumulated one coordinate at a time, both in
:func:`eval_kernel` and in :func:`gram`, so a Gram entry is bit-identical to
the corresponding pointwise evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .errors import ArgumentError, DegenerateInputError

FAMILIES = ("gaussian", "laplacian", "linear")


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ArgumentError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        if self.family != "linear":
            bw = float(self.bandwidth)
            if not np.isfinite(bw) or bw <= 0:
                raise ArgumentError(f"{self.family} kernel needs a positive bandwidth, got {self.bandwidth!r}")
        object.__setattr__(self, "bandwidth", float(self.bandwidth))

    @property
    def bounded(self) -> bool:
        return self.family != "linear"

    def to_dict(self) -> dict:
        return {"family": self.family, "bandwidth": self.bandwidth}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(d["family"], d.get("bandwidth", 1.0))


def as_points(A, name: str = "points") -> np.ndarray:
    """Coerce a point list to a finite 2-D float array (1-D input is one coordinate per point)."""
    arr = np.asarray(A, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr[:, None]
    elif arr.ndim != 2:
        raise ArgumentError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ArgumentError(f"{name} contains non-finite values")
    return arr


def _as_vector(a, name: str) -> np.ndarray:
    v = np.atleast_1d(np.asarray(a, dtype=float))
    if v.ndim != 1:
        raise ArgumentError(f"{name} must be a single point, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ArgumentError(f"{name} contains non-finite values")
    return v


def _from_reduction(spec: KernelSpec, acc):
    if spec.family == "linear":
        return acc
    s2 = spec.bandwidth * spec.bandwidth
    return np.exp(-(acc / s2))


def eval_kernel(spec: KernelSpec, a, b) -> float:
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.shape != b.shape:
        raise ArgumentError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    acc = np.float64(0.0)
    for k in range(a.shape[0]):
        if spec.family == "gaussian":
            diff = a[k] - b[k]
            acc = acc + diff * diff
        elif spec.family == "laplacian":
            acc = acc + np.abs(a[k] - b[k])
        else:
            acc = acc + a[k] * b[k]
    return float(_from_reduction(spec, acc))


def gram(spec: KernelSpec, A, B=None) -> np.ndarray:
    """Dense Gram matrix with entry (i, j) = k(A[i], B[j])."""
    A = as_points(A, "A")
    B = A if B is None else as_points(B, "B")
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ArgumentError("gram needs non-empty point lists")
    if A.shape[1] != B.shape[1]:
        raise ArgumentError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    acc = np.zeros((A.shape[0], B.shape[0]))
    for k in range(A.shape[1]):
        if spec.family == "gaussian":
            diff = A[:, k, None] - B[None, :, k]
            acc += diff * diff
        elif spec.family == "laplacian":
            acc += np.abs(A[:, k, None] - B[None, :, k])
        else:
            acc += A[:, k, None] * B[None, :, k]
    return _from_reduction(spec, acc)


def median_heuristic(points) -> float:
    """Median pairwise Euclidean distance over distinct index pairs.

    If more than half of the pairs coincide, the median of the non-zero
    distances is returned instead so the bandwidth stays positive.
    """
    P = as_points(points)
    if P.shape[0] < 2:
        raise DegenerateInputError("median heuristic needs at least 2 points")
    d = pdist(P)
    med = float(np.median(d))
    if med > 0:
        return med
    pos = d[d > 0]
    if pos.size == 0:
        raise DegenerateInputError("all points are identical; bandwidth undefined")
    return float(np.median(pos))
