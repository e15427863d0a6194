"""Sampling mechanisms, the Gaussian baseline and their calibration formulas.

Conventions: items are labelled ``1..N``; an item array uses ``0`` for a
user whose response is the zero record.  Estimates are normalized
frequencies, i.e. the true value is the histogram divided by ``n``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Optional

import numpy as np

from .field import EncodedRecord, FieldSpec, smallest_prime_above
from .streams import as_generator

__all__ = [
    "UNIFORM",
    "ADAPTIVE",
    "InfeasibleCalibration",
    "DegenerateParameterWarning",
    "MechanismParams",
    "FrequencyEstimate",
    "GaussianParams",
    "Thm2Check",
    "VariancePrediction",
    "as_items",
    "calibrate_p_thm1",
    "min_delta_thm1",
    "satisfies_thm1",
    "thm2_beta_min",
    "thm2_z_max",
    "check_thm2",
    "largest_feasible_z",
    "participation",
    "dpcs",
    "predict_variance_dpcs",
    "gaussian_sigma",
    "gaussian_params",
    "dpdg",
    "gaussian_crossover_n",
    "report_size",
    "sample_report_sets",
    "sample_report_set",
    "report_set_probability",
    "report_inclusion_prob",
    "q_chi",
    "adaptive_ldp_bound",
    "predict_variance_tss",
    "two_stage_sample",
]

UNIFORM = "uniform"
ADAPTIVE = "adaptive"
_CHIS = (UNIFORM, ADAPTIVE)


class InfeasibleCalibration(ValueError):
    """No parameter choice satisfies the privacy condition."""


class DegenerateParameterWarning(UserWarning):
    pass


def _check_chi(chi):
    if chi not in _CHIS:
        raise ValueError(f"chi must be one of {_CHIS}, got {chi!r}")


def report_size(N: int, alpha) -> int:
    """The report-set size ``alpha * N``; it must be a positive integer."""
    k = alpha * N
    k_int = round(k)
    if isinstance(k, Fraction):
        exact = k.denominator == 1
    else:
        exact = math.isclose(k, k_int, rel_tol=0, abs_tol=1e-9)
    if not exact:
        raise ValueError(f"alpha*N = {k} is not an integer")
    if not 1 <= k_int <= N:
        raise ValueError(f"alpha*N = {k_int} outside 1..{N}")
    return int(k_int)


@dataclass(frozen=True)
class MechanismParams:
    """All tunables of the sampling mechanisms.

    ``p`` is the first-stage participation probability, ``alpha`` the
    fraction of items each user reports in the second stage, ``chi`` the
    reporting distribution and ``gamma`` the adaptive preference for the
    true item.  ``phi`` bounds colluding users in the padded protocol.
    """

    epsilon: Optional[float] = None
    delta: Optional[float] = None
    p: float = 1.0
    beta: Optional[float] = None
    z: float = 0.0
    alpha: float = 1.0
    gamma: float = 1.0
    chi: str = UNIFORM
    phi: int = 0

    def __post_init__(self):
        _check_chi(self.chi)
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.delta is not None and not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.chi == ADAPTIVE and not self.gamma > 1:
            raise ValueError("adaptive reporting needs gamma > 1")
        if self.phi < 0:
            raise ValueError("phi must be non-negative")
        if self.beta is not None and not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")

    def report_size(self, N: int) -> int:
        return report_size(N, self.alpha)

    @property
    def p_chi(self) -> float:
        return report_inclusion_prob(self.alpha, self.chi, self.gamma)

    @property
    def q_chi(self) -> float:
        return q_chi(self.p, self.p_chi)


@dataclass(frozen=True, eq=False)
class FrequencyEstimate:
    """Raw counts, the normalized estimate and the divisor linking them."""

    raw_counts: np.ndarray
    normalized: np.ndarray
    scale: float

    def __post_init__(self):
        for name in ("raw_counts", "normalized"):
            a = np.array(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def N(self) -> int:
        return self.normalized.size

    def __eq__(self, other):
        if not isinstance(other, FrequencyEstimate):
            return NotImplemented
        return (
            self.scale == other.scale
            and np.array_equal(self.raw_counts, other.raw_counts)
            and np.array_equal(self.normalized, other.normalized)
        )

    __hash__ = None


@dataclass(frozen=True)
class GaussianParams:
    sensitivity: float
    sigma: float
    per_coord_variance: float


class Thm2Check(NamedTuple):
    feasible: bool
    beta_min: float
    z_max: float
    p: Optional[float]
    reason: str = ""


class VariancePrediction(NamedTuple):
    per_item: np.ndarray
    total_l2: float


# ---------------------------------------------------------------------------
# input handling


def as_items(records, N: Optional[int] = None):
    """Normalize records to ``(items, N, field)``.

    Accepts a sequence of :class:`EncodedRecord`, an ``(n, N)`` 0/1 matrix,
    or any object with ``items`` and ``N`` attributes (a dataset).
    """
    if hasattr(records, "items") and hasattr(records, "N") and not isinstance(records, dict):
        items = np.asarray(records.items, dtype=np.int64)
        return items, int(records.N), getattr(records, "field", None)
    if isinstance(records, np.ndarray) and records.ndim == 2:
        mat = records.astype(np.int64)
        if np.any((mat != 0) & (mat != 1)) or np.any(mat.sum(axis=1) > 1):
            raise ValueError("rows must be one-hot or zero")
        hot = mat.argmax(axis=1) + 1
        items = np.where(mat.sum(axis=1) == 1, hot, 0)
        return items, mat.shape[1], None
    records = list(records)
    if not records:
        raise ValueError("no records supplied")
    if not all(isinstance(r, EncodedRecord) for r in records):
        raise TypeError("expected EncodedRecord instances")
    sizes = {r.N for r in records}
    if len(sizes) != 1:
        raise ValueError(f"records have differing lengths {sorted(sizes)}")
    fields = {r.field for r in records if r.field is not None}
    if len(fields) > 1:
        raise ValueError("records encoded over different fields")
    items = np.fromiter((r.item or 0 for r in records), dtype=np.int64, count=len(records))
    return items, sizes.pop(), (fields.pop() if fields else None)


def _require_one_hot(items):
    if items.size == 0:
        raise ValueError("no records supplied")
    if np.any(items == 0):
        raise ValueError("inputs must be one-hot; zero records are not user data")


def _field_for(n, field):
    if field is None:
        return smallest_prime_above(max(n, 1))
    if field.q <= n:
        raise ValueError(f"field modulus {field.q} must exceed the population {n}")
    return field


def _histogram(items, N):
    return np.bincount(items, minlength=N + 1)[1:]


# ---------------------------------------------------------------------------
# calibration


def calibrate_p_thm1(epsilon: float) -> float:
    """Participation probability ``1 - exp(-epsilon)``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return -math.expm1(-epsilon)


def _thm1_x(n, epsilon, beta):
    return 2 * math.pi * n * beta * (math.exp(-epsilon) - math.exp(-2 * epsilon))


def min_delta_thm1(n: int, N: int, epsilon: float, beta: float) -> float:
    """Smallest delta for which the participation bound holds.

    With ``X = 2 pi n beta (e^-eps - e^-2eps)`` the bound reads
    ``X >= max((2 pi / delta)^(2/(N+1)), delta^(-2/N))``, which inverts to
    ``delta = max(2 pi X^(-(N+1)/2), X^(-N/2))``.
    """
    if n < 1 or N < 1:
        raise ValueError("n and N must be positive")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    x = _thm1_x(n, epsilon, beta)
    if x <= 1:
        raise InfeasibleCalibration(f"X = {x:.6g} <= 1: no delta < 1 satisfies the bound")
    log_x = math.log(x)
    log_delta = max(math.log(2 * math.pi) - (N + 1) / 2 * log_x, -N / 2 * log_x)
    if log_delta >= 0:
        raise InfeasibleCalibration(f"X = {x:.6g} too small: minimal delta >= 1")
    return math.exp(log_delta)


def satisfies_thm1(n: int, N: int, epsilon: float, delta: float, beta: float) -> bool:
    """Direct evaluation of the participation bound (in log space)."""
    x = _thm1_x(n, epsilon, beta)
    if x <= 0:
        return False
    rhs = max(2 / (N + 1) * math.log(2 * math.pi / delta), 2 / N * math.log(1 / delta))
    return math.log(x) >= rhs


def thm2_beta_min(n: int, N: int, epsilon: float, delta: float, z: float) -> float:
    half = math.exp(-epsilon / 2)
    pref = math.exp(z + epsilon) / (2 * math.pi * n * (1 - half) ** 2)
    first = (2 * math.pi / delta) ** (2 / (N + 1)) / (1 + half) ** 2
    second = (4 * math.pi / delta) ** (2 / N)
    return pref * max(first, second)


def thm2_z_max(n: int, N: int, epsilon: float, beta: float) -> float:
    slack = 1 - beta * (N - 1)
    if slack <= 0:
        raise InfeasibleCalibration(f"beta*(N-1) = {beta * (N - 1):.6g} >= 1")
    return math.log1p(n * slack * (1 - math.exp(-epsilon / 2)))


def check_thm2(n, N, epsilon, delta, beta, z) -> Thm2Check:
    """Check the tighter bound for a caller-supplied slack ``z``."""
    if min(n, N, epsilon, delta, beta) <= 0 or z < 0:
        raise ValueError("parameters must be positive (z non-negative)")
    beta_min = thm2_beta_min(n, N, epsilon, delta, z)
    try:
        z_max = thm2_z_max(n, N, epsilon, beta)
    except InfeasibleCalibration as exc:
        return Thm2Check(False, beta_min, math.nan, None, str(exc))
    if beta < beta_min:
        return Thm2Check(False, beta_min, z_max, None, f"beta {beta} < beta_min {beta_min:.6g}")
    if z > z_max:
        return Thm2Check(False, beta_min, z_max, None, f"z {z} > z_max {z_max:.6g}")
    return Thm2Check(True, beta_min, z_max, -math.expm1(-z - epsilon))


def largest_feasible_z(n, N, epsilon, delta, beta) -> float:
    """Largest slack z meeting both conditions.

    ``beta_min`` grows like ``e^z``, so the first condition is
    ``z <= ln(beta / beta_min(z=0))``; combine with ``z_max``.
    """
    z_beta = math.log(beta / thm2_beta_min(n, N, epsilon, delta, 0.0))
    z = min(z_beta, thm2_z_max(n, N, epsilon, beta))
    # step inside the boundary so that check_thm2 accepts the result despite rounding
    z -= 1e-12 * max(1.0, abs(z))
    if z < 0:
        raise InfeasibleCalibration(f"no z >= 0 is feasible (best {z:.6g})")
    return z


# ---------------------------------------------------------------------------
# centralized sampling


def participation(n: int, p: float, rng) -> np.ndarray:
    """One Bernoulli(p) coin per user, drawn as ``rng.random(n) < p``."""
    return as_generator(rng).random(n) < p


def dpcs(records, p: float, rng=None, field: Optional[FieldSpec] = None) -> FrequencyEstimate:
    """Keep each user with probability ``p``; estimate = kept counts / (p n)."""
    items, N, rec_field = as_items(records)
    _require_one_hot(items)
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    n = items.size
    spec = _field_for(n, field or rec_field)
    kept = participation(n, p, rng)
    raw = np.mod(_histogram(items[kept], N), spec.q)
    return FrequencyEstimate(raw, raw / (p * n), p * n)


def predict_variance_dpcs(p: float, n: int, counts) -> VariancePrediction:
    """Per-item variance ``(1-p) Pi_i / (p n^2)`` and total ``(1-p)/(p n)``."""
    counts = np.asarray(counts, dtype=float)
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if p == 0:
        warnings.warn("p = 0: nobody participates, variance is infinite",
                      DegenerateParameterWarning, stacklevel=2)
        return VariancePrediction(np.full(counts.shape, math.inf), math.inf)
    if p == 1:
        warnings.warn("p = 1: no sampling noise", DegenerateParameterWarning, stacklevel=2)
    factor = (1 - p) / (p * n * n)
    return VariancePrediction(factor * counts, (1 - p) / (p * n))


# ---------------------------------------------------------------------------
# Gaussian baseline


def gaussian_sigma(epsilon: float, delta: float) -> float:
    if not epsilon > 0 or not 0 < delta < 1:
        raise ValueError("need epsilon > 0 and 0 < delta < 1")
    return math.sqrt(2 * math.log(1.25 / delta)) / epsilon


def gaussian_params(n: int, epsilon: float, delta: float) -> GaussianParams:
    sigma = gaussian_sigma(epsilon, delta)
    g = math.sqrt(2) / n
    return GaussianParams(g, sigma, (g * sigma) ** 2)


def dpdg(records, epsilon: float, delta: float, rng=None, distributed: bool = False) -> FrequencyEstimate:
    """Exact normalized histogram plus N(0, (G_f sigma)^2) noise per coordinate.

    With ``distributed=True`` every user contributes an independent share of
    the noise with standard deviation ``G_f sigma / sqrt(n)``; the sum has the
    same distribution as the single draw.
    """
    rng = as_generator(rng)
    items, N, _ = as_items(records)
    _require_one_hot(items)
    n = items.size
    gp = gaussian_params(n, epsilon, delta)
    scale = gp.sensitivity * gp.sigma
    if distributed:
        noise = rng.normal(0.0, scale / math.sqrt(n), size=(n, N)).sum(axis=0)
    else:
        noise = rng.normal(0.0, scale, size=N)
    counts = _histogram(items, N)
    return FrequencyEstimate(counts, counts / n + noise, float(n))


def gaussian_crossover_n(epsilon: float, delta: float) -> int:
    """Smallest integer n above ``4 (e^eps - 1) ln(1.25/delta) / eps^2``."""
    if not epsilon > 0 or not 0 < delta < 1:
        raise ValueError("need epsilon > 0 and 0 < delta < 1")
    threshold = 4 * math.expm1(epsilon) * math.log(1.25 / delta) / epsilon ** 2
    return math.floor(threshold) + 1


# ---------------------------------------------------------------------------
# second-stage reporting


def report_inclusion_prob(alpha, chi: str = UNIFORM, gamma=1.0):
    """Probability that a participant's true item lands in its report set."""
    _check_chi(chi)
    if chi == UNIFORM:
        return alpha
    return alpha * gamma / (alpha * gamma + 1 - alpha)


def q_chi(p, p_chi):
    return p * p_chi


def adaptive_ldp_bound(gamma=None, chi: str = UNIFORM) -> float:
    """Local privacy loss of the report sets seen by the first helper server."""
    _check_chi(chi)
    if chi == UNIFORM:
        return 0.0
    if gamma is None or not gamma > 1:
        raise ValueError("adaptive reporting needs gamma > 1")
    return math.log(gamma)


def report_set_probability(A, item: Optional[int], N: int, k: int, chi: str = UNIFORM, gamma=1):
    """Exact probability of drawing report set ``A`` (a set of labels in 1..N).

    Returns a :class:`~fractions.Fraction` when ``gamma`` is rational.
    """
    _check_chi(chi)
    A = frozenset(A)
    if len(A) != k or not A <= set(range(1, N + 1)):
        return Fraction(0)
    if chi == UNIFORM or item is None or item == 0:
        return Fraction(1, math.comb(N, k))
    g = Fraction(gamma) if not isinstance(gamma, float) else Fraction(gamma).limit_denominator(10**12)
    denom = g * math.comb(N - 1, k - 1) + math.comb(N - 1, k)
    return (g if item in A else Fraction(1)) / denom


def sample_report_sets(items, N: int, k: int, chi: str, gamma, rng) -> np.ndarray:
    """Draw one report set per user; returns an ``(n, N)`` boolean matrix.

    Stream consumption is fixed regardless of ``chi``: ``rng.random(n)``
    (adaptive inclusion coins) followed by ``rng.random((n, N))`` (item
    ranking keys).  Under the adaptive rule a user holding item ``j``
    includes ``j`` with probability ``p_chi`` and fills the remaining slots
    uniformly; every set containing ``j`` is then equally likely, as are all
    sets avoiding it, which reproduces the set probabilities exactly.
    """
    _check_chi(chi)
    rng = as_generator(rng)
    items = np.asarray(items, dtype=np.int64)
    n = items.size
    if not 1 <= k <= N:
        raise ValueError(f"report size {k} outside 1..{N}")
    coins = rng.random(n)
    keys = rng.random((n, N))
    if chi == ADAPTIVE:
        p_in = report_inclusion_prob(k / N, ADAPTIVE, gamma)
        holders = np.flatnonzero(items > 0)
        cols = items[holders] - 1
        keys[holders, cols] = np.where(coins[holders] < p_in, -1.0, 2.0)
    chosen = np.argpartition(keys, k - 1, axis=1)[:, :k] if k < N else np.tile(np.arange(N), (n, 1))
    out = np.zeros((n, N), dtype=bool)
    np.put_along_axis(out, chosen, True, axis=1)
    return out


def sample_report_set(encoded: EncodedRecord, N: int, alpha, chi: str = UNIFORM, gamma=1.0, rng=None) -> frozenset:
    """Single-user form of :func:`sample_report_sets`; returns labels in 1..N."""
    if encoded.N != N:
        raise ValueError("record length does not match N")
    k = report_size(N, alpha)
    row = sample_report_sets([encoded.item or 0], N, k, chi, gamma, rng)[0]
    return frozenset(int(j) + 1 for j in np.flatnonzero(row))


def predict_variance_tss(q_chi_value: float, n: int) -> float:
    """Total variance ``(1 - q_chi) / (n q_chi)`` of the two-stage estimate."""
    if not 0 <= q_chi_value <= 1:
        raise ValueError("q_chi must lie in [0, 1]")
    if q_chi_value == 0:
        warnings.warn("q_chi = 0: estimate undefined", DegenerateParameterWarning, stacklevel=2)
        return math.inf
    if q_chi_value == 1:
        warnings.warn("q_chi = 1: no sampling noise", DegenerateParameterWarning, stacklevel=2)
    return (1 - q_chi_value) / (n * q_chi_value)


def two_stage_sample(records, params: MechanismParams, rng=None, field: Optional[FieldSpec] = None):
    """Plaintext counterpart of the two-stage protocol.

    Draws the participation coins and the report sets exactly as the
    protocol simulator does from its coin stream, then counts, for every
    item, the participants holding it that also report it.  Returns the
    estimate and the boolean report matrix.
    """
    rng = as_generator(rng)
    items, N, rec_field = as_items(records)
    _require_one_hot(items)
    n = items.size
    spec = _field_for(n, field or rec_field)
    k = params.report_size(N)
    active = participation(n, params.p, rng)
    encoded = np.where(active, items, 0)
    reports = sample_report_sets(encoded, N, k, params.chi, params.gamma, rng)
    hit = encoded > 0
    reported_true = reports[np.flatnonzero(hit), encoded[hit] - 1]
    raw = np.mod(_histogram(encoded[hit][reported_true], N), spec.q)
    scale = params.q_chi * n
    return FrequencyEstimate(raw, raw / scale, scale), reports
