"""Estimator-style wrappers around the mechanisms.

Each estimator takes its privacy parameters in ``__init__``, learns a noisy
histogram in :meth:`fit` and exposes it as ``frequency_``.  ``X`` is either
a 1-d array of item labels in ``1..n_items`` or a 2-d one-hot matrix with
one row per user.  ``score(X)`` is the negative MSE between the fitted
estimate and the exact histogram of ``X``, so larger is better.

    >>> est = SamplingFrequencyEstimator(epsilon=1.0, n_items=3, random_state=0)
    >>> est.fit([1, 2, 2, 3, 3, 3]).frequency_.shape
    (3,)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import streams
from .datasets import Dataset
from .mechanisms import (
    UNIFORM,
    MechanismParams,
    calibrate_p_thm1,
    dpcs,
    dpdg,
    gaussian_params,
    two_stage_sample,
)
from .metrics import mse
from .protocols import run_dpds, run_tss, run_tss_prime
from .weighting import (
    GroupReport,
    closed_form_weights,
    combine,
    optimize_weights,
    sampling_group_variance,
    unweighted,
)

__all__ = [
    "check_items",
    "SamplingFrequencyEstimator",
    "GaussianFrequencyEstimator",
    "TwoStageFrequencyEstimator",
    "WeightedFrequencyAggregator",
]


def check_items(X, n_items=None):
    """Validate ``X`` and return ``(labels, N)``.

    Accepts item labels (1-d, integers ``>= 1``) or a one-hot matrix.
    ``N`` is ``n_items`` when given, else the largest label or the number
    of columns.
    """
    arr = np.asarray(X)
    if arr.ndim == 2:
        arr = check_array(arr, dtype=np.int64)
        if not np.isin(arr, (0, 1)).all() or not (arr.sum(axis=1) == 1).all():
            raise ValueError("2-d input must be one-hot with exactly one 1 per row")
        labels = arr.argmax(axis=1) + 1
        N = arr.shape[1]
    else:
        labels = check_array(arr.reshape(-1, 1), dtype=None).ravel()
        if not np.issubdtype(labels.dtype, np.number) or not np.all(labels == np.round(labels)):
            raise ValueError("item labels must be integers")
        labels = labels.astype(np.int64)
        if labels.min() < 1:
            raise ValueError("item labels start at 1")
        N = int(labels.max())
    if n_items is not None:
        if int(n_items) < N:
            raise ValueError(f"n_items={n_items} is smaller than the data's domain {N}")
        N = int(n_items)
    return labels, N


def _seed(random_state):
    if random_state is None:
        return int(np.random.SeedSequence().generate_state(1)[0])
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    raise ValueError("random_state must be an int or None")


class _FrequencyEstimator(BaseEstimator):
    def score(self, X, y=None):
        check_is_fitted(self, "frequency_")
        labels, N = check_items(X, self.n_items_)
        if N != self.n_items_:
            raise ValueError("X has a different item domain than the fitted data")
        truth = np.bincount(labels, minlength=N + 1)[1:] / labels.size
        return -mse(truth, self.frequency_)

    def _record(self, labels, N, est):
        self.n_items_ = N
        self.n_users_ = int(labels.size)
        self.counts_ = np.asarray(est.raw_counts)
        self.frequency_ = np.asarray(est.normalized, dtype=float)


class SamplingFrequencyEstimator(_FrequencyEstimator):
    """Bernoulli participation with probability ``p`` (``1 - e^-epsilon`` by default).

    ``decentralized=True`` runs the share-based protocol instead of the
    plaintext mechanism; both give the same estimate for the same seed.
    """

    def __init__(self, epsilon=1.0, p=None, n_items=None, decentralized=False, random_state=streams.DEFAULT_SEED):
        self.epsilon = epsilon
        self.p = p
        self.n_items = n_items
        self.decentralized = decentralized
        self.random_state = random_state

    def fit(self, X, y=None):
        labels, N = check_items(X, self.n_items)
        p = self.p if self.p is not None else calibrate_p_thm1(self.epsilon)
        seed = _seed(self.random_state)
        data = Dataset("fit", N, labels)
        if self.decentralized:
            run = run_dpds(data, p, seed)
            est, self.transcript_ = run.estimate, run.transcript
        else:
            est = dpcs(data, p, streams.coin_stream(seed))
        self.p_ = float(p)
        self._record(labels, N, est)
        self.predicted_mse_ = (1 - p) / (p * labels.size * N) if p > 0 else np.inf
        return self


class GaussianFrequencyEstimator(_FrequencyEstimator):
    def __init__(self, epsilon=1.0, delta=1e-7, n_items=None, distributed=False, random_state=streams.DEFAULT_SEED):
        self.epsilon = epsilon
        self.delta = delta
        self.n_items = n_items
        self.distributed = distributed
        self.random_state = random_state

    def fit(self, X, y=None):
        labels, N = check_items(X, self.n_items)
        rng = streams.stream(_seed(self.random_state), streams.NOISE)
        est = dpdg(Dataset("fit", N, labels), self.epsilon, self.delta, rng, distributed=self.distributed)
        gp = gaussian_params(labels.size, self.epsilon, self.delta)
        self.sigma_ = gp.sigma
        self.predicted_mse_ = gp.per_coord_variance
        self._record(labels, N, est)
        return self


class TwoStageFrequencyEstimator(_FrequencyEstimator):
    """Participation followed by item-subset reporting.

    ``engine`` is ``"centralized"`` (plaintext, fast) or ``"protocol"``
    (message-level simulation with two helper servers; ``phi > 0`` pads the
    aggregator election).
    """

    def __init__(self, epsilon=1.0, p=None, alpha=1.0, chi=UNIFORM, gamma=1.0, phi=0,
                 n_items=None, engine="centralized", random_state=streams.DEFAULT_SEED):
        self.epsilon = epsilon
        self.p = p
        self.alpha = alpha
        self.chi = chi
        self.gamma = gamma
        self.phi = phi
        self.n_items = n_items
        self.engine = engine
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.engine not in ("centralized", "protocol"):
            raise ValueError("engine must be 'centralized' or 'protocol'")
        labels, N = check_items(X, self.n_items)
        p = self.p if self.p is not None else calibrate_p_thm1(self.epsilon)
        params = MechanismParams(p=p, alpha=self.alpha, chi=self.chi, gamma=self.gamma, phi=self.phi)
        params.report_size(N)
        seed = _seed(self.random_state)
        data = Dataset("fit", N, labels)
        if self.engine == "protocol":
            run = (run_tss_prime if self.phi > 0 else run_tss)(data, params, seed)
            est, self.transcript_ = run.estimate, run.transcript
        else:
            est = two_stage_sample(data, params, streams.coin_stream(seed))[0]
        self.params_ = params
        self.q_chi_ = params.q_chi
        self.predicted_mse_ = (1 - self.q_chi_) / (self.q_chi_ * labels.size * N)
        self._record(labels, N, est)
        return self


class WeightedFrequencyAggregator(_FrequencyEstimator):
    """Per-group sampling estimates pooled with weights.

    ``epsilons[g]`` is the budget of group ``g``; ``fit(X, y)`` takes group
    labels ``y`` in ``0..len(epsilons)-1``.  ``method`` is
    ``"closed_form"``, ``"optimized"``, ``"unweighted"`` or ``"smallest"``
    (release the most private group's estimate alone).
    """

    _METHODS = ("closed_form", "optimized", "unweighted", "smallest")

    def __init__(self, epsilons=(1.0,), method="closed_form", n_items=None, random_state=streams.DEFAULT_SEED):
        self.epsilons = epsilons
        self.method = method
        self.n_items = n_items
        self.random_state = random_state

    def fit(self, X, y):
        if self.method not in self._METHODS:
            raise ValueError(f"method must be one of {self._METHODS}")
        labels, N = check_items(X, self.n_items)
        groups = check_array(np.asarray(y).reshape(-1, 1), dtype=np.int64).ravel()
        if groups.size != labels.size:
            raise ValueError("X and y have different lengths")
        eps = np.asarray(self.epsilons, dtype=float)
        if groups.min() < 0 or groups.max() >= eps.size:
            raise ValueError(f"group labels must lie in 0..{eps.size - 1}")
        seed = _seed(self.random_state)
        variances = sampling_group_variance(eps)
        reports = []
        for g in range(eps.size):
            members = labels[groups == g]
            if members.size == 0:
                raise ValueError(f"group {g} is empty")
            est = dpcs(Dataset("group", N, members), calibrate_p_thm1(eps[g]),
                       streams.coin_stream(streams.derive_seed(seed, g)))
            reports.append(GroupReport(g, float(eps[g]), int(members.size), est.normalized, float(variances[g])))
        sizes = [r.n for r in reports]
        if self.method == "smallest":
            j = int(np.argmin(eps))
            freq = reports[j].estimate
            self.weights_ = np.eye(eps.size)[j]
        else:
            if self.method == "closed_form":
                w = closed_form_weights(variances)
            elif self.method == "optimized":
                w = optimize_weights(sizes, variances)
            else:
                w = unweighted(eps.size)
            freq = combine(reports, w)
            self.weights_ = np.asarray(w)
        self.group_estimates_ = np.stack([r.estimate for r in reports])
        self.group_sizes_ = np.asarray(sizes)
        self.n_items_ = N
        self.n_users_ = int(labels.size)
        self.frequency_ = np.asarray(freq, dtype=float)
        return self
