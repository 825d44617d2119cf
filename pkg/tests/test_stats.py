"""Harness behavior: manifest determinism, worker independence, statistics
against analytic oracles, and honest error bars."""

import math
import os

import numpy as np
import pytest

from bbmlab.limits import logt_coefficient
from bbmlab.stats import (FluctuationSample, RunManifest, attach_statistics,
                          cf_distance, empirical_cf, fit_cauchy_mixture,
                          fluctuation_statistic, hill_index, hill_sensitivity,
                          run_fluctuation_ensemble, run_stopping_ensemble,
                          stoppingline_moment_check, write_samples_csv)

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def test_manifest_roundtrip_and_hash():
    m = RunManifest(kind="fluctuations", t=12.0, replicates=10, seed=3,
                    barrier_level=1.0, barrier_t_end=math.inf)
    m2 = RunManifest.from_json(m.to_json())
    assert m == m2
    assert m.hash() == m2.hash()
    m3 = RunManifest.from_json(m.to_json())
    m3.seed = 4
    assert m3.hash() != m.hash()


def test_ensemble_worker_count_invariance():
    m = RunManifest(kind="fluctuations", t=6.0, replicates=40, seed=5)
    s1 = run_fluctuation_ensemble(m, workers=1)
    s2 = run_fluctuation_ensemble(m, workers=2)
    assert [(a.replicate, a.W_t, a.Z_t, a.Z_F, a.Z_T, a.statistic) for a in s1] \
        == [(b.replicate, b.W_t, b.Z_t, b.Z_F, b.Z_T, b.statistic) for b in s2]


def test_budget_failures_are_flagged_not_fatal():
    m = RunManifest(kind="fluctuations", t=8.0, replicates=6, seed=6,
                    max_segments=40)
    got_fail = False
    try:
        samples = run_fluctuation_ensemble(m, workers=1)
        got_fail = any(not s.ok for s in samples)
    except RuntimeError as exc:
        got_fail = "every replicate failed" in str(exc)
    assert got_fail


def test_samples_csv_reruns_byte_identical(tmp_path):
    m = RunManifest(kind="fluctuations", t=6.0, replicates=25, seed=7)
    p1, p2 = os.path.join(tmp_path, "a.csv"), os.path.join(tmp_path, "b.csv")
    write_samples_csv(p1, m, run_fluctuation_ensemble(m, workers=2))
    write_samples_csv(p2, m, run_fluctuation_ensemble(m, workers=1))
    assert open(p1, "rb").read() == open(p2, "rb").read()


# --- statistic formulas -------------------------------------------------------

def test_statistic_zero_at_exact_scaling():
    t, zT = 9.0, 1.7
    W = SQRT_2_OVER_PI * zT / math.sqrt(t)
    assert fluctuation_statistic(t, W, 0.0, 0.0, zT, "additive-cauchy") == 0.0


def test_statistic_linearity():
    t = 16.0
    a = fluctuation_statistic(t, 0.3, 0.0, 0.0, 0.9, "additive-cauchy")
    b = fluctuation_statistic(t, 0.6, 0.0, 0.0, 1.8, "additive-cauchy")
    assert b == pytest.approx(2 * a, rel=1e-12)


def test_general_f_constant_matches_handcoded_derivative_statistic():
    # with the constant functional the general statistic must equal
    # sqrt(t) (Z - Z_T - log(t)/sqrt(2 pi t) Z_T) to the last bit available
    lc = logt_coefficient("one")
    rng = np.random.default_rng(2)
    t = 20.0
    for _ in range(200):
        zf, zT = rng.normal(1.0, 0.3), rng.normal(1.0, 0.3)
        got = fluctuation_statistic(t, 0.0, zf, zf, zT, "general-F",
                                    ef=1.0, logt_coeff=lc)
        hand = math.sqrt(t) * (zf - zT - math.log(t) / math.sqrt(2 * math.pi * t) * zT)
        assert abs(got - hand) < 1e-12


def test_general_f_requires_coefficients():
    with pytest.raises(ValueError):
        fluctuation_statistic(4.0, 0, 0, 0, 0, "general-F")
    with pytest.raises(ValueError):
        fluctuation_statistic(4.0, 0, 0, 0, 0, "no-such-mode")


def test_attach_statistics_modes():
    s = FluctuationSample(0, 16.0, W_t=0.2, Z_t=1.0, Z_F=1.0, T=21.0, Z_T=1.1)
    attach_statistics([s], "additive-cauchy")
    assert np.isfinite(s.statistic)


# --- instruments vs oracles ----------------------------------------------------

def test_ecf_trivials():
    lam = np.array([-1.5, 0.5, 2.0])
    v, se = empirical_cf(np.zeros(50), lam)
    assert np.allclose(v, 1.0) and np.all(se == 0.0)
    x = np.array([0.3, -1.2, 4.0])
    a, _ = empirical_cf(x, [0.7])
    b, _ = empirical_cf(x, [-0.7])
    assert a[0] == np.conj(b[0])


def test_ecf_cauchy_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_cauchy(100_000)
    v, se = empirical_cf(x, [1.0])
    assert abs(v[0] - math.exp(-1.0)) < 3 * se[0]
    assert se[0] <= 1.0 / math.sqrt(x.size) + 1e-12


def test_ecf_se_bootstrap_coverage():
    rng = np.random.default_rng(4)
    x = rng.standard_cauchy(4000)
    lam = np.linspace(0.2, 3.0, 8)
    v0, se = empirical_cf(x, lam)
    inside = 0
    total = 0
    for _ in range(100):
        res = rng.choice(x, size=x.size, replace=True)
        vb, _ = empirical_cf(res, lam)
        inside += int(np.all(np.abs(vb - v0) <= 3 * se))
        total += 1
    assert inside / total >= 0.95


def test_cf_distance_oracles():
    lam = np.linspace(-4, 4, 33)
    lam = lam[lam != 0]
    rng = np.random.default_rng(5)
    cauchy_model = np.exp(-np.abs(lam))
    same, _ = cf_distance(cauchy_model, cauchy_model, lam)
    assert same == 0.0
    ecf, _ = empirical_cf(rng.standard_cauchy(100_000), lam)
    d, prof = cf_distance(ecf, cauchy_model, lam)
    assert d < 0.02 and prof.shape == lam.shape
    ecf_g, _ = empirical_cf(rng.normal(size=100_000), lam)
    d2, _ = cf_distance(ecf_g, cauchy_model, lam)
    assert d2 > 0.1


def test_hill_oracles():
    rng = np.random.default_rng(6)
    u = rng.uniform(size=100_000)
    a1, se1 = hill_index(1.0 / u, 1000)
    assert abs(a1 - 1.0) < 0.1
    a2, _ = hill_index(u ** -0.5, 1000)
    assert abs(a2 - 2.0) < 0.2
    a3, _ = hill_index(rng.exponential(size=100_000), 1000)
    assert a3 > 3.0
    with pytest.raises(ValueError):
        hill_index(np.ones(10), 8)
    curve = hill_sensitivity(1.0 / u)
    assert len(curve) >= 5
    assert all(abs(a - 1.0) < 0.2 for _, a, _ in curve)


def test_additive_statistic_is_heavy_tailed_median_finite():
    # recorded property: sample skewness of the additive statistic is not a
    # stable quantity (heavy tails), while the median stays finite
    m = RunManifest(kind="fluctuations", t=10.0, replicates=300, seed=8)
    samples = run_fluctuation_ensemble(m, workers=2)
    stats = np.array([s.statistic for s in samples if s.ok])
    assert np.isfinite(np.median(stats))
    # fourth moment dwarfs the square of the second: heavy-tail signature
    assert (stats ** 4).mean() > 10 * (stats ** 2).mean() ** 2


def test_fit_cauchy_mixture_recovers_parameters():
    rng = np.random.default_rng(9)
    zs = rng.exponential(size=4000) + 0.2
    # conditional Cauchy(scale c z, drift d z) given z
    c_true, d_true = 1.5, 0.6
    draws = d_true * zs + c_true * zs * rng.standard_cauchy(zs.size)
    lam = np.concatenate([np.linspace(-2, -0.1, 10), np.linspace(0.1, 2, 10)])
    c, d, dist = fit_cauchy_mixture(draws, zs, lam)
    assert abs(c - c_true) < 0.15
    assert abs(d - d_true) < 0.15
    assert dist < 0.05


def test_stopping_moment_check_closed_forms():
    m = RunManifest(kind="stopping-line", t=8.0, replicates=2500, seed=10,
                    x0=1.0, barrier_level=0.0, x_max=30.0)
    counts, tbr, floors, failed = run_stopping_ensemble(m, workers=2)
    assert not failed and not floors.any()
    chk = stoppingline_moment_check(tbr, 1.0, None, horizon=8.0)
    assert abs(chk["z"]) < 3.0
    # indicator of late kills, plus the envelope C e^{-x} (1 ^ x/sqrt(s))
    s0 = 4.0
    late = stoppingline_moment_check(
        tbr, 1.0, lambda r: np.asarray(r >= s0, dtype=float), horizon=8.0)
    assert abs(late["z"]) < 3.0
    assert late["mc_mean"] <= 5.0 * math.exp(-1.0) * min(1.0, 1.0 / math.sqrt(s0))


def test_stopping_moment_check_x3():
    m = RunManifest(kind="stopping-line", t=8.0, replicates=2500, seed=11,
                    x0=3.0, barrier_level=0.0, x_max=30.0)
    counts, tbr, _, _ = run_stopping_ensemble(m, workers=2)
    chk = stoppingline_moment_check(tbr, 3.0, None, horizon=8.0)
    assert abs(chk["z"]) < 3.0
