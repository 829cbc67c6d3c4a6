"""Dense numeric helpers and a central-difference gradient checker.

Matrices are plain ``float64`` numpy arrays in C (row-major) order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import EmptyInputError, ZeroVectorError

EPS_NORM = 1e-12
REL_ERR_FLOOR = 1e-8


def as_matrix(a, cols: int | None = None) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1) if cols is None else m.reshape(-1, cols)
    return m


def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = float(np.sqrt(np.dot(v, v)))
    if not n > EPS_NORM:
        raise ZeroVectorError(f"cannot normalize vector with norm {n:g}")
    return v / n


def l2_normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization; returns ``(unit_rows, norms)``."""
    m = np.asarray(m, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    bad = np.flatnonzero(~(norms > EPS_NORM))
    if bad.size:
        raise ZeroVectorError(f"row {int(bad[0])} has norm {norms[bad[0]]:g}")
    return m / norms[:, None], norms


def normalize_rows_backward(z: np.ndarray, norms: np.ndarray, dz: np.ndarray) -> np.ndarray:
    # Jacobian of v/|v| is (I - z z^T)/|v|
    proj = np.einsum("ij,ij->i", z, dz)
    return (dz - z * proj[:, None]) / norms[:, None]


def log_sum_exp(xs) -> float:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if xs.size == 0:
        raise EmptyInputError("log_sum_exp of an empty vector")
    m = float(xs.max())
    if not np.isfinite(m):
        return m
    return m + float(np.log(np.sum(np.exp(xs - m))))


def log_sum_exp_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp of a 2-D array."""
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    passed: bool
    tolerance: float

    def __bool__(self) -> bool:
        return self.passed


def numeric_gradient(f: Callable[[np.ndarray], float], point, h: float = 1e-5) -> np.ndarray:
    x = np.array(point, dtype=np.float64, copy=True).ravel()
    g = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = f(x.copy())
        x[i] = orig - h
        fm = f(x.copy())
        x[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_check(f: Callable[[np.ndarray], float], analytic_grad, point,
                      h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare ``analytic_grad`` with central differences of ``f`` at ``point``.

    The relative error of coordinate i is ``|a_i - n_i| / max(|a_i|, |n_i|, 1e-8)``.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h:g} outside [1e-7, 1e-3]")
    a = np.asarray(analytic_grad, dtype=np.float64).ravel()
    n = numeric_gradient(f, point, h)
    if a.shape != n.shape:
        raise ValueError(f"gradient has {a.size} entries, point has {n.size}")
    if a.size == 0:
        return GradCheckReport(0.0, -1, True, tol)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_ERR_FLOOR)
    rel = np.abs(a - n) / denom
    rel = np.where(np.isfinite(rel), rel, np.inf)
    worst = int(np.argmax(rel))
    err = float(rel[worst])
    return GradCheckReport(err, worst, err < tol, tol)
