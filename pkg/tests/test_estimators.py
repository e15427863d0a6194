import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fairfreq import streams
from fairfreq.datasets import synth_uniform
from fairfreq.estimators import (
    GaussianFrequencyEstimator,
    SamplingFrequencyEstimator,
    TwoStageFrequencyEstimator,
    WeightedFrequencyAggregator,
    check_items,
)
from fairfreq.mechanisms import MechanismParams, dpcs, two_stage_sample


@pytest.fixture(scope="module")
def data():
    return synth_uniform(600, 10, seed=1)


def test_check_items_forms():
    labels, N = check_items([1, 3, 2])
    assert labels.tolist() == [1, 3, 2] and N == 3
    labels, N = check_items(np.eye(4, dtype=int)[[0, 3]])
    assert labels.tolist() == [1, 4] and N == 4
    assert check_items([1, 2], n_items=5)[1] == 5
    for bad in ([0, 1], [1.5], np.array([[1, 1, 0]]), [[]]):
        with pytest.raises(ValueError):
            check_items(bad)
    with pytest.raises(ValueError):
        check_items([1, 7], n_items=5)


def test_params_roundtrip_and_clone():
    est = TwoStageFrequencyEstimator(alpha=0.4, chi="adaptive", gamma=2.0)
    params = est.get_params()
    assert params["alpha"] == 0.4 and params["chi"] == "adaptive"
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "frequency_")
    est.set_params(alpha=0.2)
    assert est.alpha == 0.2


def test_unfitted_score_raises(data):
    with pytest.raises(NotFittedError):
        SamplingFrequencyEstimator().score(data.items)


def test_sampling_estimator_matches_mechanism(data):
    est = SamplingFrequencyEstimator(epsilon=1.0, random_state=5).fit(data.items)
    ref = dpcs(data, est.p_, streams.coin_stream(5))
    assert np.array_equal(est.frequency_, ref.normalized)
    assert est.n_items_ == 10 and est.n_users_ == 600
    assert est.score(data.items) <= 0
    dec = SamplingFrequencyEstimator(epsilon=1.0, decentralized=True, random_state=5).fit(data.items[:80])
    cen = SamplingFrequencyEstimator(epsilon=1.0, random_state=5).fit(data.items[:80])
    assert np.array_equal(dec.frequency_, cen.frequency_)
    assert dec.transcript_.protocol == "dpds"


def test_gaussian_estimator(data):
    est = GaussianFrequencyEstimator(epsilon=1.0, delta=1e-5, random_state=0).fit(data.items)
    assert est.frequency_.shape == (10,)
    assert est.predicted_mse_ > 0 and est.sigma_ > 0


def test_two_stage_estimator(data):
    est = TwoStageFrequencyEstimator(p=0.5, alpha=0.4, random_state=3).fit(data.items)
    ref, _ = two_stage_sample(data, MechanismParams(p=0.5, alpha=0.4), streams.coin_stream(3))
    assert np.array_equal(est.frequency_, ref.normalized)
    assert est.q_chi_ == pytest.approx(0.2)
    with pytest.raises(ValueError):
        TwoStageFrequencyEstimator(alpha=0.45).fit(data.items)
    padded = TwoStageFrequencyEstimator(p=0.5, alpha=0.4, phi=3, engine="protocol", random_state=3)
    assert np.array_equal(padded.fit(data.items[:60]).frequency_,
                          TwoStageFrequencyEstimator(p=0.5, alpha=0.4, random_state=3).fit(data.items[:60]).frequency_)


def test_weighted_aggregator(data):
    groups = np.repeat(np.arange(4), 150)
    kw = dict(epsilons=[0.1, 0.4, 0.7, 1.0], random_state=1)
    closed = WeightedFrequencyAggregator(method="closed_form", **kw).fit(data.items, groups)
    assert np.round(closed.weights_, 4).tolist() == [0.0316, 0.1477, 0.3045, 0.5162]
    optimized = WeightedFrequencyAggregator(method="optimized", **kw).fit(data.items, groups)
    assert np.allclose(closed.frequency_, optimized.frequency_, atol=1e-6)
    smallest = WeightedFrequencyAggregator(method="smallest", **kw).fit(data.items, groups)
    assert np.array_equal(smallest.frequency_, smallest.group_estimates_[0])
    with pytest.raises(ValueError):
        WeightedFrequencyAggregator(method="median", **kw).fit(data.items, groups)
    with pytest.raises(ValueError):
        WeightedFrequencyAggregator(**kw).fit(data.items, groups[:-1])
    with pytest.raises(ValueError):
        WeightedFrequencyAggregator(**kw).fit(data.items, np.full(600, 4))
