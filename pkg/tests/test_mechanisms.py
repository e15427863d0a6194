import itertools
import math
import warnings
from fractions import Fraction

import mpmath
import numpy as np
import pytest
from scipy.stats import chisquare

from fairfreq import streams
from fairfreq.datasets import synth_uniform
from fairfreq.field import encode_one_hot, zero_record
from fairfreq.mechanisms import (
    ADAPTIVE,
    UNIFORM,
    DegenerateParameterWarning,
    InfeasibleCalibration,
    MechanismParams,
    adaptive_ldp_bound,
    as_items,
    calibrate_p_thm1,
    check_thm2,
    dpcs,
    dpdg,
    gaussian_crossover_n,
    gaussian_params,
    gaussian_sigma,
    largest_feasible_z,
    min_delta_thm1,
    predict_variance_dpcs,
    predict_variance_tss,
    q_chi,
    report_inclusion_prob,
    report_set_probability,
    report_size,
    sample_report_set,
    sample_report_sets,
    satisfies_thm1,
    two_stage_sample,
)

mpmath.mp.dps = 50


# -- calibration ------------------------------------------------------------


@pytest.mark.parametrize("eps", [0.5, 1.0, 0.1, 3.0])
def test_participation_probability(eps):
    assert calibrate_p_thm1(eps) == pytest.approx(float(1 - mpmath.exp(-eps)), rel=1e-14)


def test_participation_probability_values():
    assert round(calibrate_p_thm1(0.5), 6) == 0.393469
    assert round(calibrate_p_thm1(1.0), 6) == 0.632121
    assert calibrate_p_thm1(1e-12) < 1e-11
    with pytest.raises(ValueError):
        calibrate_p_thm1(0)


def _mp_min_delta(n, N, eps, beta):
    x = 2 * mpmath.pi * n * beta * (mpmath.exp(-eps) - mpmath.exp(-2 * eps))
    return x, max(2 * mpmath.pi * x ** (-mpmath.mpf(N + 1) / 2), x ** (-mpmath.mpf(N) / 2))


def test_min_delta_against_high_precision():
    x, d = _mp_min_delta(1000, 30, 0.5, 0.02)
    assert float(x) == pytest.approx(29.99, abs=0.01)
    assert float(d) == pytest.approx(8.0e-23, rel=0.01)
    assert min_delta_thm1(1000, 30, 0.5, 0.02) == pytest.approx(float(d), rel=1e-9)


@pytest.mark.parametrize("n, N, eps, beta", [(1000, 12, 0.1, 0.05), (5000, 30, 1.0, 0.01), (200, 4, 0.3, 0.2)])
def test_min_delta_grid(n, N, eps, beta):
    _, d = _mp_min_delta(n, N, eps, beta)
    if d >= 1:
        with pytest.raises(InfeasibleCalibration):
            min_delta_thm1(n, N, eps, beta)
    else:
        assert min_delta_thm1(n, N, eps, beta) == pytest.approx(float(d), rel=1e-9)


def test_min_delta_resubstitutes():
    d = min_delta_thm1(1000, 30, 0.5, 0.02)
    assert satisfies_thm1(1000, 30, 0.5, d * (1 + 1e-9), 0.02)
    assert not satisfies_thm1(1000, 30, 0.5, d * 0.5, 0.02)


def test_min_delta_infeasible_when_x_at_most_one():
    eps, n = 0.5, 100
    beta = 1 / (2 * math.pi * n * (math.exp(-eps) - math.exp(-2 * eps)))
    for b in (beta, beta * 0.999):
        with pytest.raises(InfeasibleCalibration):
            min_delta_thm1(n, 10, eps, b)


def test_thm2_example():
    chk = check_thm2(1000, 30, 0.5, 1e-6, 0.02, 0.0)
    assert chk.feasible
    assert chk.beta_min == pytest.approx(0.0159, abs=1e-4)
    assert chk.z_max == pytest.approx(4.54, abs=0.01)
    assert chk.p == pytest.approx(0.3935, abs=1e-4)


def test_thm2_z_too_large_and_boundary_beta():
    chk = check_thm2(1000, 30, 0.5, 1e-6, 0.02, 5.0)
    assert not chk.feasible and 5.0 > chk.z_max
    chk = check_thm2(1000, 30, 0.5, 1e-6, 1 / 29, 0.0)
    assert not chk.feasible and chk.reason


def test_largest_feasible_z_is_accepted_and_maximal():
    z = largest_feasible_z(1000, 30, 0.5, 1e-6, 0.02)
    assert check_thm2(1000, 30, 0.5, 1e-6, 0.02, z).feasible
    assert not check_thm2(1000, 30, 0.5, 1e-6, 0.02, z + 1e-6).feasible
    # the slack only ever raises p
    assert check_thm2(1000, 30, 0.5, 1e-6, 0.02, z).p > calibrate_p_thm1(0.5)


# -- centralized sampling ---------------------------------------------------


def test_as_items_accepts_all_record_forms():
    recs = [encode_one_hot(2, 3), encode_one_hot(3, 3), zero_record(3)]
    items, N, _ = as_items(recs)
    assert items.tolist() == [2, 3, 0] and N == 3
    items, N, _ = as_items(np.array([[0, 1, 0], [0, 0, 1]]))
    assert items.tolist() == [2, 3] and N == 3
    with pytest.raises(ValueError):
        as_items(np.array([[1, 1, 0]]))


def test_dpcs_without_sampling_is_exact():
    ds = synth_uniform(500, 7, seed=1)
    est = dpcs(ds, 1.0, np.random.default_rng(0))
    assert np.array_equal(est.normalized, ds.frequencies())
    assert est.normalized.sum() == pytest.approx(1.0, abs=1e-12)


def test_dpcs_is_reproducible():
    ds = synth_uniform(300, 5, seed=2)
    a = dpcs(ds, 0.4, streams.coin_stream(9))
    b = dpcs(ds, 0.4, streams.coin_stream(9))
    assert a == b


def test_dpcs_rejects_bad_input():
    with pytest.raises(ValueError):
        dpcs([encode_one_hot(1, 2), zero_record(2)], 0.5)
    with pytest.raises(ValueError):
        dpcs([encode_one_hot(1, 2)], 0.0)


def test_dpcs_unbiased_per_item():
    ds = synth_uniform(1000, 30, seed=3)
    rng = np.random.default_rng(4)
    T = 10_000
    est = np.array([dpcs(ds, 0.5, rng).normalized for _ in range(T)])
    se = est.std(axis=0, ddof=1) / math.sqrt(T)
    assert np.all(np.abs(est.mean(axis=0) - ds.frequencies()) < 3.5 * se)
    assert np.all(np.abs(est.mean(axis=0) - 1 / 30) < 3.5 * se + 4 * math.sqrt((1 / 30) * (29 / 30) / 1000))


def test_dpcs_total_squared_error():
    ds = synth_uniform(100, 10, seed=5)
    rng = np.random.default_rng(6)
    truth = ds.frequencies()
    err = [np.sum((dpcs(ds, 0.5, rng).normalized - truth) ** 2) for _ in range(20_000)]
    assert np.mean(err) == pytest.approx(0.01, rel=0.1)


def test_predicted_variance_dpcs():
    pred = predict_variance_dpcs(0.5, 100, [50, 50])
    assert pred.per_item.tolist() == pytest.approx([0.005, 0.005])
    assert pred.total_l2 == pytest.approx(0.01)
    assert sum(pred.per_item) == pytest.approx(pred.total_l2)
    with pytest.warns(DegenerateParameterWarning):
        assert predict_variance_dpcs(1.0, 100, [50, 50]).total_l2 == 0
    with pytest.warns(DegenerateParameterWarning):
        assert predict_variance_dpcs(0.0, 100, [50, 50]).total_l2 == math.inf


# -- Gaussian baseline ------------------------------------------------------


def test_gaussian_sigma():
    expected = mpmath.sqrt(2 * mpmath.log(mpmath.mpf(1.25) / mpmath.mpf("1e-7"))) / mpmath.mpf("0.1")
    assert gaussian_sigma(0.1, 1e-7) == pytest.approx(float(expected), rel=1e-12)
    assert round(gaussian_sigma(0.1, 1e-7), 2) == 57.17


def test_gaussian_variance_formula():
    gp = gaussian_params(1000, 0.1, 1e-7)
    assert gp.per_coord_variance == pytest.approx(6.54e-3, rel=1e-3)
    assert gp.per_coord_variance == pytest.approx(4 * math.log(1.25e7) / (1000 ** 2 * 0.01), rel=1e-12)


def test_gaussian_noise_moments():
    ds = synth_uniform(1000, 3, seed=8)
    rng = np.random.default_rng(9)
    T = 100_000
    noise = np.array([dpdg(ds, 0.1, 1e-7, rng).normalized for _ in range(T)]) - ds.frequencies()
    vg = gaussian_params(1000, 0.1, 1e-7).per_coord_variance
    assert np.all(np.abs(noise.mean(axis=0)) < 3.5 * math.sqrt(vg / T))
    assert np.all(np.abs(noise.var(axis=0) / vg - 1) < 0.05)


def test_distributed_gaussian_matches_central_variance():
    ds = synth_uniform(100, 4, seed=10)
    rng = np.random.default_rng(11)
    noise = np.array([dpdg(ds, 0.5, 1e-5, rng, distributed=True).normalized for _ in range(5000)])
    vg = gaussian_params(100, 0.5, 1e-5).per_coord_variance
    assert np.all(np.abs(noise.var(axis=0) / vg - 1) < 0.1)


def test_gaussian_crossover():
    assert gaussian_crossover_n(1.0, 1e-5) == 81
    thr = 4 * (math.e - 1) * math.log(1.25e5)
    assert thr == pytest.approx(80.66, abs=0.01)
    assert gaussian_crossover_n(1.0, 1.25 / math.e) == 7
    for eps in (0.1, 0.5, 1.0, 2.0):
        assert gaussian_crossover_n(eps, 1e-6) > gaussian_crossover_n(eps, 1e-5)


def test_crossover_is_where_variances_meet():
    eps, delta = 1.0, 1e-5
    n_star = gaussian_crossover_n(eps, delta)
    sampling = lambda n: (1 - calibrate_p_thm1(eps)) / (calibrate_p_thm1(eps) * n)
    gauss = lambda n: gaussian_params(n, eps, delta).per_coord_variance
    assert sampling(n_star - 1) <= gauss(n_star - 1)
    assert sampling(n_star) > gauss(n_star)


# -- report sets ------------------------------------------------------------


def _subsets(N, k):
    return [frozenset(c) for c in itertools.combinations(range(1, N + 1), k)]


def test_report_set_probabilities_n4_k2():
    sets = _subsets(4, 2)
    adaptive = {A: report_set_probability(A, 1, 4, 2, ADAPTIVE, 2) for A in sets}
    assert all(p == (Fraction(2, 9) if 1 in A else Fraction(1, 9)) for A, p in adaptive.items())
    assert sum(adaptive.values()) == 1
    assert all(report_set_probability(A, 1, 4, 2, UNIFORM) == Fraction(1, 6) for A in sets)
    assert all(report_set_probability(A, 0, 4, 2, ADAPTIVE, 2) == Fraction(1, 6) for A in sets)
    assert report_set_probability({1}, 1, 4, 2, ADAPTIVE, 2) == 0


def test_inclusion_probability():
    assert report_inclusion_prob(Fraction(1, 2), ADAPTIVE, 2) == Fraction(2, 3)
    enumerated = sum(report_set_probability(A, 1, 4, 2, ADAPTIVE, 2) for A in _subsets(4, 2) if 1 in A)
    assert enumerated == Fraction(2, 3)
    assert q_chi(0.5, report_inclusion_prob(0.4)) == pytest.approx(0.2)
    assert report_inclusion_prob(0.3, ADAPTIVE, 1) == pytest.approx(0.3)
    assert MechanismParams(p=0.5, alpha=0.4).q_chi == pytest.approx(0.2)


def test_ldp_bound_and_likelihood_ratio():
    assert adaptive_ldp_bound(chi=UNIFORM) == 0
    assert adaptive_ldp_bound(2, ADAPTIVE) == pytest.approx(0.6931, abs=1e-4)
    ratios = [
        report_set_probability(A, v, 4, 2, ADAPTIVE, 2) / report_set_probability(A, w, 4, 2, ADAPTIVE, 2)
        for A in _subsets(4, 2) for v in range(1, 5) for w in range(1, 5)
    ]
    assert max(ratios) == 2


def test_report_size_must_be_integral():
    assert report_size(10, 0.4) == 4
    with pytest.raises(ValueError):
        report_size(10, 0.45)
    with pytest.raises(ValueError):
        MechanismParams(alpha=0.45).report_size(10)


@pytest.mark.parametrize("chi, gamma, item", [(ADAPTIVE, 2, 1), (ADAPTIVE, 3, 4), (UNIFORM, 1, 2), (ADAPTIVE, 2, 0)])
def test_sampler_matches_exact_set_law(chi, gamma, item):
    N, k, T = 4, 2, 60_000
    rows = sample_report_sets(np.full(T, item), N, k, chi, gamma, np.random.default_rng(12))
    assert np.all(rows.sum(axis=1) == k)
    sets = _subsets(N, k)
    index = {A: t for t, A in enumerate(sets)}
    observed = np.zeros(len(sets))
    for r in rows:
        observed[index[frozenset(np.flatnonzero(r) + 1)]] += 1
    expected = np.array([float(report_set_probability(A, item, N, k, chi, gamma)) for A in sets]) * T
    assert chisquare(observed, expected).pvalue > 1e-3


def test_single_user_report_set():
    A = sample_report_set(encode_one_hot(3, 5), 5, 0.4, ADAPTIVE, 2, np.random.default_rng(0))
    assert len(A) == 2 and A <= set(range(1, 6))


def test_predicted_variance_tss():
    assert predict_variance_tss(0.2, 1000) == pytest.approx(0.004)
    with pytest.warns(DegenerateParameterWarning):
        assert predict_variance_tss(1.0, 1000) == 0
    for gamma in (1.5, 2, 3):
        qa = MechanismParams(p=0.5, alpha=0.4, chi=ADAPTIVE, gamma=gamma).q_chi
        qu = MechanismParams(p=0.5, alpha=0.4).q_chi
        assert qa > qu
        assert predict_variance_tss(qa, 1000) < predict_variance_tss(qu, 1000)


# -- two-stage sampling -----------------------------------------------------


def test_two_stage_full_reporting_is_exact():
    ds = synth_uniform(200, 6, seed=13)
    est, reports = two_stage_sample(ds, MechanismParams(p=1.0, alpha=1.0), np.random.default_rng(0))
    assert np.array_equal(est.normalized, ds.frequencies())
    assert reports.all()


def test_two_stage_variance():
    ds = synth_uniform(1000, 30, seed=14)
    params = MechanismParams(p=0.5, alpha=0.4)
    rng = np.random.default_rng(15)
    T = 1000
    est = np.array([two_stage_sample(ds, params, rng)[0].normalized for _ in range(T)])
    truth = ds.frequencies()
    total = est.var(axis=0, ddof=1).sum()
    assert total == pytest.approx((1 - 0.2) / (1000 * 0.2), rel=0.15)
    se = est.std(axis=0, ddof=1) / math.sqrt(T)
    assert np.mean(np.abs(est.mean(axis=0) - truth) < 3 * se) > 0.95


def test_two_stage_is_unbiased():
    ds = synth_uniform(1000, 30, seed=17)
    params = MechanismParams(p=0.5, alpha=0.4)
    rng = np.random.default_rng(18)
    T = 10_000
    est = np.array([two_stage_sample(ds, params, rng)[0].normalized for _ in range(T)])
    se = est.std(axis=0, ddof=1) / math.sqrt(T)
    assert np.all(np.abs(est.mean(axis=0) - ds.frequencies()) < 4 * se)


def test_adaptive_beats_uniform():
    ds = synth_uniform(1000, 30, seed=16)
    truth = ds.frequencies()
    for p in (0.2, 0.5, 0.8):
        mse = {}
        for chi, gamma in ((UNIFORM, 1.0), (ADAPTIVE, 2.0)):
            params = MechanismParams(p=p, alpha=0.4, chi=chi, gamma=gamma)
            errs = [np.mean((two_stage_sample(ds, params, streams.coin_stream(t))[0].normalized - truth) ** 2)
                    for t in range(20)]
            mse[chi] = np.mean(errs)
        assert mse[ADAPTIVE] < mse[UNIFORM]
