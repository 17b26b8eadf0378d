"""Tests for the KS forget-quality statistic.

The statistic is checked against a loop-based ECDF oracle, the p-value
against a long-form series evaluation and against scipy's Kolmogorov
distribution (scipy is a test-only dependency, used as an oracle).
"""

import math

import numpy as np
import pytest
import scipy.special
import scipy.stats

from queen import stats

# ---------------------------------------------------------------- oracles


def naive_ks_statistic(a, b):
    """Max |ECDF difference| via plain loops over every observed value."""
    best = 0.0
    for v in set(list(a) + list(b)):
        fa = sum(1 for x in a if x <= v) / len(a)
        fb = sum(1 for x in b if x <= v) / len(b)
        best = max(best, abs(fa - fb))
    return best


def naive_series(lam, terms=1000):
    return 2.0 * sum(
        (-1) ** (j - 1) * math.exp(-2.0 * j * j * lam * lam) for j in range(1, terms)
    )


# ------------------------------------------------------------------ tests


def test_identical_samples():
    res = stats.ks_forget_quality([0, 1, 2, 2, 1], [0, 1, 2, 2, 1])
    assert res.statistic == 0.0
    assert res.p_value == 1.0


def test_disjoint_supports():
    res = stats.ks_forget_quality([0] * 50, [1] * 50)
    assert res.statistic == 1.0
    assert res.p_value < 1e-9


def test_hand_example():
    res = stats.ks_forget_quality([0, 0, 1], [0, 1, 1])
    assert abs(res.statistic - 1 / 3) < 1e-15


def test_statistic_matches_naive_oracle():
    rng = np.random.default_rng(41)
    for trial in range(10):
        a = rng.integers(0, 10, size=500)
        b = rng.integers(0, 10, size=500) if trial % 2 else rng.integers(3, 10, size=500)
        res = stats.ks_forget_quality(a, b)
        assert abs(res.statistic - naive_ks_statistic(a.tolist(), b.tolist())) < 1e-12


def test_p_value_matches_series_and_scipy():
    rng = np.random.default_rng(43)
    for _ in range(10):
        a = rng.integers(0, 10, size=400)
        b = rng.integers(0, 8, size=300)
        res = stats.ks_forget_quality(a, b)
        lam = res.statistic * math.sqrt(400 * 300 / 700)
        if lam >= 0.2:
            assert abs(res.p_value - naive_series(lam)) < 1e-6
        assert abs(res.p_value - float(scipy.special.kolmogorov(lam))) < 1e-6


def test_kolmogorov_sf_against_scipy_grid():
    for lam in np.linspace(0.2, 3.0, 29):
        assert abs(stats.kolmogorov_sf(float(lam)) - float(scipy.special.kolmogorov(lam))) < 1e-9
    # below the series cutoff the survival function is 1 to double precision
    assert stats.kolmogorov_sf(0.1) == 1.0
    assert float(scipy.special.kolmogorov(0.19)) == pytest.approx(1.0, abs=1e-12)


def test_matches_scipy_ks_2samp():
    rng = np.random.default_rng(47)
    a = rng.integers(0, 10, size=500)
    b = rng.integers(0, 10, size=500)
    res = stats.ks_forget_quality(a, b)
    ref = scipy.stats.ks_2samp(a, b, method="asymp")
    assert abs(res.statistic - ref.statistic) < 1e-12
    # scipy's asymp p applies a finite-sample refinement beyond the
    # classical series, so the values agree only approximately
    assert abs(res.p_value - ref.pvalue) < 0.05


def test_symmetry_and_ranges():
    rng = np.random.default_rng(53)
    a = rng.integers(0, 5, size=80)
    b = rng.integers(0, 5, size=120)
    r1 = stats.ks_forget_quality(a, b)
    r2 = stats.ks_forget_quality(b, a)
    assert r1.statistic == r2.statistic
    assert r1.p_value == r2.p_value
    assert 0.0 <= r1.statistic <= 1.0
    assert 0.0 <= r1.p_value <= 1.0


def test_empty_sample_rejected():
    with pytest.raises(ValueError):
        stats.ks_forget_quality([], [1, 2])
    with pytest.raises(ValueError):
        stats.ks_forget_quality([1], [])


def test_lam_validation():
    with pytest.raises(ValueError):
        stats.kolmogorov_sf(-0.1)
