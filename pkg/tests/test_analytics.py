import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from catbbm import ModelParams, derive_rates
from catbbm.analytics import (decay_fit, expected_count_above, expected_population, growth_rate_fit,
                              mean_and_se, normal_cdf, survival_estimate, z_score)
from catbbm.params import rates_from_effective

D = rates_from_effective(1.0, 1.0)


def test_normal_cdf():
    assert abs(normal_cdf(1.0) - oracles.PHI_1) < 1e-15
    assert abs(normal_cdf(math.sqrt(10)) - oracles.PHI_SQRT10) < 1e-15
    arr = normal_cdf(np.array([0.0, 1.0]))
    assert arr[0] == 0.5 and abs(arr[1] - oracles.PHI_1) < 1e-15


@pytest.mark.parametrize("t,x,ref", [
    (1.0, 0.0, oracles.COUNT_T1_X0),
    (1.0, 0.5, oracles.COUNT_T1_X05),
    (0.5, 0.0, oracles.COUNT_T05_X0),
    (2.0, 0.0, oracles.COUNT_T2_X0),
])
def test_expected_count_closed_form(t, x, ref):
    assert abs(expected_count_above(D, t, x) - ref) <= 1e-12 * ref


def test_rounded_figures_within_tolerance():
    # the rounded figures quoted for these cases are within 1e-4 relative
    assert abs(expected_count_above(D, 1, 0) - oracles.ROUNDED_COUNT_T1_X0) / oracles.ROUNDED_COUNT_T1_X0 < 1e-4
    assert abs(expected_count_above(D, 1, 0.5) - oracles.ROUNDED_COUNT_T1_X05) / oracles.ROUNDED_COUNT_T1_X05 < 1e-4
    assert abs(expected_population(D, 1) - oracles.ROUNDED_POP_T1) / oracles.ROUNDED_POP_T1 < 1e-4


def test_expected_population():
    assert abs(expected_population(D, 1.0) - oracles.POP_T1) < 1e-12
    assert expected_count_above(D, 1.0, math.inf) == 0.0
    with pytest.raises(ValueError):
        expected_count_above(D, 1.0, -0.1)
    with pytest.raises(ValueError):
        expected_population(D, 0.0)


def test_pure_homogeneous_reduces_to_gaussian_tail():
    d = derive_rates(ModelParams.binary(1.0, 1.0).homogeneous_only())
    for x in (0.0, 0.7, 2.0):
        assert abs(expected_count_above(d, 1.5, x) - math.exp(1.5) * normal_cdf(-x / math.sqrt(1.5))) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 3.0), st.floats(0.05, 3.0), st.floats(0.1, 5.0), st.floats(0.0, 3.0))
def test_count_monotone_in_x(b, b0, t, x):
    d = rates_from_effective(b, b0)
    assert expected_count_above(d, t, x + 0.1) <= expected_count_above(d, t, x)


def test_growth_fit_exact_exponential():
    series = [(t, 3.0 * math.exp(1.5 * t)) for t in np.linspace(0, 8, 33)]
    fit = growth_rate_fit(series)
    assert abs(fit.slope - 1.5) < 1e-12 and fit.window == (4.0, 8.0)
    assert fit.n_points == 17 and abs(fit.r_squared - 1) < 1e-12
    assert fit.to_dict()["window"] == [4.0, 8.0]


def test_growth_fit_errors():
    with pytest.raises(ValueError):
        growth_rate_fit([(0, 1), (1, 2), (2, 0), (3, 4)], 1.0)
    with pytest.raises(ValueError):
        growth_rate_fit([(0, 1), (1, 2), (2, 3)], 1.0)
    with pytest.raises(ValueError):
        growth_rate_fit([(0, 1), (1, 2), (2, 3), (3, 4)], 0.0)


def test_wilson_values():
    p, lo, hi = survival_estimate(0, 100)
    assert p == 0 and lo == 0 and abs(hi - oracles.WILSON_0_100_HI) < 1e-12
    p, lo, hi = survival_estimate(50, 100)
    assert p == 0.5
    assert abs(lo - oracles.WILSON_50_100[0]) < 1e-12 and abs(hi - oracles.WILSON_50_100[1]) < 1e-12
    p, lo, hi = survival_estimate(1, 1)
    assert hi == 1.0 and abs(lo - oracles.WILSON_1_1_LO) < 1e-12
    with pytest.raises(ValueError):
        survival_estimate(3, 2)


def test_mean_se_and_z():
    m, se = mean_and_se([1.0, 2.0, 3.0])
    assert m == 2.0 and abs(se - 1 / math.sqrt(3)) < 1e-15
    assert z_score(2.0, 0.5, 1.0) == 2.0
    assert z_score(1.0, 0.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        mean_and_se([1.0])


def test_decay_fit():
    times = [1.0, 2.0, 3.0, 4.0]
    trials = [10 ** 6] * 4
    succ = [int(round(1e6 * math.exp(-0.8 * t))) for t in times]
    slope, _, n = decay_fit(times, succ, trials)
    assert n == 4 and abs(slope + 0.8) < 1e-3
    assert decay_fit(times, [5, 4, 3, 2], trials) is None
