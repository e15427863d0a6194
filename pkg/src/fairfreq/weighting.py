"""Weighted aggregation of estimates released by several privacy groups.

Group ``j`` has ``n_j`` users whose reports have per-user variance ``V_j``.
With weights ``w`` the pooled estimate is
``sum_j w_j n_j est_j / sum_j w_j n_j`` and its expected squared error is

    Delta(w) = sum_j w_j^2 n_j V_j / (sum_j n_j w_j)^2.

Its critical points are the multiples of ``1/V``; normalizing onto the
simplex gives the inverse-variance weights.  Aggregation is post-processing
of released estimates and never touches raw records.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

__all__ = [
    "CLOSED_FORM",
    "OPTIMIZED",
    "UNWEIGHTED",
    "ConvergenceError",
    "GroupReport",
    "WeightAssignment",
    "sampling_group_variance",
    "closed_form_weights",
    "unweighted",
    "optimize_weights",
    "expected_squared_error",
    "optimal_squared_error",
    "combine",
]

CLOSED_FORM = "closed_form"
OPTIMIZED = "optimized"
UNWEIGHTED = "unweighted"


class ConvergenceError(RuntimeError):
    def __init__(self, message, best):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True, eq=False)
class GroupReport:
    """A privacy group's released estimate and what is known about its noise."""

    group_id: object
    epsilon: float
    n: int
    estimate: np.ndarray
    variance: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("group population must be at least 1")
        if not self.variance > 0:
            raise ValueError("group variance must be positive")
        est = np.atleast_1d(np.array(self.estimate, dtype=float))
        est.setflags(write=False)
        object.__setattr__(self, "estimate", est)


@dataclass(frozen=True)
class WeightAssignment:
    weights: Tuple[float, ...]
    method: str

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        if not w or any(x <= 0 for x in w):
            raise ValueError("weights must be positive")
        if not math.isclose(sum(w), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"weights sum to {sum(w)}, not 1")
        object.__setattr__(self, "weights", w)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)

    def __len__(self):
        return len(self.weights)


def sampling_group_variance(epsilon) -> np.ndarray:
    """Relative per-user variance of a sampling group, ``(1-p)/p = 1/(e^eps - 1)``.

    Uses ``p = 1 - e^-eps``; constant factors cancel in the weights.
    """
    eps = np.asarray(epsilon, dtype=float)
    if np.any(eps <= 0):
        raise ValueError("epsilon must be positive")
    return 1.0 / np.expm1(eps)


def _positive(values, name) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-d sequence")
    if np.any(~(arr > 0)) or np.any(~np.isfinite(arr)):
        raise ValueError(f"all {name} must be positive and finite")
    return arr


def closed_form_weights(variances: Sequence[float]) -> WeightAssignment:
    """Inverse-variance weights ``(1/V_i) / sum_j 1/V_j``."""
    v = _positive(variances, "variances")
    inv = 1.0 / v
    return WeightAssignment(tuple(inv / inv.sum()), CLOSED_FORM)


def unweighted(mu: int) -> WeightAssignment:
    return WeightAssignment((1.0 / mu,) * mu, UNWEIGHTED)


def expected_squared_error(weights, sizes, variances) -> float:
    w = _positive(weights, "weights")
    n = _positive(sizes, "sizes")
    v = _positive(variances, "variances")
    if not w.size == n.size == v.size:
        raise ValueError("weights, sizes and variances differ in length")
    return float(np.sum(w * w * n * v) / np.sum(n * w) ** 2)


def optimal_squared_error(sizes, variances) -> float:
    """Delta at the inverse-variance weights, ``1 / sum_j n_j / V_j``."""
    n = _positive(sizes, "sizes")
    v = _positive(variances, "variances")
    return float(1.0 / np.sum(n / v))


def optimize_weights(sizes, variances, tolerance: float = 1e-16,
                     max_iter: int = 1000, floor: float = 1e-12) -> WeightAssignment:
    """Minimize ``Delta`` over the simplex numerically (SLSQP).

    Sizes and variances are rescaled by their maxima first and the
    objective is divided by its value at uniform weights; the minimizer is
    invariant to all three.  ``tolerance`` is the solver's relative
    objective tolerance and weights are kept above ``floor``.  Raises
    :class:`ConvergenceError` carrying the last iterate when the solver
    fails or ``max_iter`` is exhausted.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    n = _positive(sizes, "sizes")
    v = _positive(variances, "variances")
    if n.size != v.size:
        raise ValueError("sizes and variances differ in length")
    if n.size == 1:
        return WeightAssignment((1.0,), OPTIMIZED)
    n = n / n.max()
    v = v / v.max()
    k = n.size
    w0 = np.full(k, 1.0 / k)
    s0 = np.dot(n, w0)
    f0 = np.dot(w0 * w0 * n, v) / (s0 * s0)

    def f(w):
        s = np.dot(n, w)
        return np.dot(w * w * n, v) / (s * s) / f0

    def grad(w):
        s = np.dot(n, w)
        return 2 * n / (s * s) * (w * v - np.dot(w * w * n, v) / s) / f0

    with warnings.catch_warnings():
        # SLSQP clips trial points to the bounds and says so; that is expected here
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(
            f, w0, jac=grad, method="SLSQP", bounds=[(floor, 1.0)] * k,
            constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0, "jac": lambda w: np.ones(k)}],
            options={"ftol": tolerance, "maxiter": max_iter},
        )
    w = np.maximum(res.x, floor)
    best = WeightAssignment(tuple(w / w.sum()), OPTIMIZED)
    if not res.success:
        raise ConvergenceError(f"weight optimization failed: {res.message}", best)
    return best


def combine(reports: Sequence[GroupReport], weights: Optional[WeightAssignment] = None) -> np.ndarray:
    """Pool group estimates with coefficients ``w_j n_j`` (renormalized).

    Without ``weights`` the inverse-variance weights of the reports are used.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to combine")
    dims = {r.estimate.shape for r in reports}
    if len(dims) != 1:
        raise ValueError(f"group estimates differ in shape: {sorted(dims)}")
    if weights is None:
        weights = closed_form_weights([r.variance for r in reports])
    w = np.asarray(weights, dtype=float)
    if w.size != len(reports):
        raise ValueError("one weight per group is required")
    coef = w * np.array([r.n for r in reports], dtype=float)
    stacked = np.stack([r.estimate for r in reports])
    return coef @ stacked / coef.sum()
