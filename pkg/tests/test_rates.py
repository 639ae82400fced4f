from fractions import Fraction

import numpy as np
import pytest
import sympy
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rankflow.errors import AssumptionViolated, ParametersOutsideSigma
from rankflow.model import DriftField, Window
from rankflow.rates import (RateSequence, StabilityViolation, difference_residual, finite_rates,
                            geometric_strategy, lambda_ab, lambda_ab_sequence, lambda_limit,
                            linear_strategy, power_strategy, sample_pi_ab, sigma_region,
                            window_rates)

ZERO = DriftField.constant(0.0)
EX3 = DriftField(0, 1, (0.0, 1.0), 0.0, 1.0)   # g_n = 1 for n >= 1, else 0
EX4 = DriftField(0, 1, (1.0, 0.0), 1.0, 0.0)   # g_n = 1 for n <= 0, else 0


def example5(depth=80):
    # g_n = 2^(n-1) for n <= 0 (total mass 1), 0 above; left tail cut where 2^(n-1) underflows 1e-24
    return DriftField.from_function(lambda n: 2.0 ** (n - 1), -depth, 0, 0.0, 0.0)


def brute_phi(g, n):
    return sum(g(i) for i in range(0, n)) if n >= 1 else -sum(g(i) for i in range(n, 0))


fields = st.builds(
    lambda n_minus, core, lo, hi: DriftField(n_minus, n_minus + len(core) - 1, core, lo, hi),
    st.integers(-4, 3), st.lists(st.floats(-3, 3), min_size=1, max_size=6),
    # tails on a 1/8 grid so a tail slope is never below float resolution at |n| = 1e9
    st.integers(-24, 24).map(lambda k: k / 8), st.integers(-24, 24).map(lambda k: k / 8))


# --- (a, b) family -----------------------------------------------------------

def test_lambda_zero_drift_is_constant():
    assert all(lambda_ab(ZERO, 0.7, 0.0, n) == 0.7 for n in range(-10, 11))


@pytest.mark.parametrize("a,b", [(1.0, 0.0), (0.5, -1.0), (2.0, -2.0), (-1.0, 3.0)])
def test_lambda_example3(a, b):
    for n in range(-12, 13):
        assert lambda_ab(EX3, a, b, n) == a + b * n + 2 * max(n, 0)


@pytest.mark.parametrize("a,b", [(1.0, 0.0), (0.5, -1.0), (-3.0, 2.0)])
def test_lambda_example4_up_to_constant(a, b):
    # direct evaluation gives 2 Phi_{n+1} = 2 (n + 1) ^ 2, i.e. the displayed form shifted by 2 in a
    for n in range(-12, 13):
        assert lambda_ab(EX4, a, b, n) == a + 2 + b * n + 2 * min(n, 0)


@settings(max_examples=60)
@given(fields, st.floats(-5, 5), st.floats(-5, 5), st.integers(-20, 20))
def test_lambda_matches_brute_force_phi(g, a, b, n):
    assert lambda_ab(g, a, b, n) == pytest.approx(2 * brute_phi(g, n + 1) + a + b * n, abs=1e-9)


# --- difference equation -----------------------------------------------------

@settings(max_examples=100)
@given(fields, st.floats(-5, 5), st.floats(-5, 5))
def test_difference_identity(g, a, b):
    lam = lambda_ab_sequence(g, a, b, g.n_minus - 6, g.n_plus + 6)
    res = difference_residual(lam, g)
    assert max(abs(r) for r in res.values) <= 1e-12 * max(1.0, max(abs(v) for v in lam.values))


def test_residual_of_finite_rates_with_zero_boundary():
    g = [2.0, 1.0, 0.5, 0.0]
    mu = finite_rates(g)
    res = difference_residual(mu, DriftField.finite(g))
    assert res.indices == range(1, 4)
    assert max(abs(r) for r in res.values) <= 1e-12


def test_residual_linearity_under_single_perturbation():
    eps = 0.125
    lam = lambda_ab_sequence(EX3, 1.0, -0.5, -5, 5)
    bumped = list(lam.values)
    bumped[5] += eps                        # index 0
    res = difference_residual(RateSequence(-5, bumped, "ab_family"), EX3)
    assert res[-1] == pytest.approx(eps / 2, abs=1e-12)
    assert res[0] == pytest.approx(-eps, abs=1e-12)
    assert res[1] == pytest.approx(eps / 2, abs=1e-12)
    assert all(abs(res[n]) <= 1e-12 for n in res.indices if n not in (-1, 0, 1))


# --- finite systems ------------------------------------------------------------

def test_finite_rates_examples():
    assert finite_rates([1.0, 0.0]).values == (1.0,)
    assert finite_rates([2.0, 1.0, 0.0]).values == (2.0, 2.0)
    bad = finite_rates([0.0, 0.0])
    assert isinstance(bad, StabilityViolation) and bad.first_failing == 1


def test_stability_violation_reports_first_failure():
    bad = finite_rates([3.0, -1.0, 2.0, 0.0])
    assert isinstance(bad, StabilityViolation)
    assert bad.first_failing == 2


@settings(max_examples=60)
@given(st.lists(st.integers(-20, 20), min_size=2, max_size=9))
def test_bvp_identity_exact(ints):
    g = [Fraction(v, 4) for v in ints]
    n_total = len(g)
    mu = finite_rates(g)
    values = mu.values if isinstance(mu, RateSequence) else mu.values
    gbar = sum(g) / n_total
    for l in range(1, n_total):
        for k in range(l + 1, n_total):
            assert values[k - 1] - values[l - 1] == 2 * sum(g[l:k]) - 2 * (k - l) * gbar


def test_window_formula_is_product_form_symbolically():
    for count in range(2, 7):
        gs = sympy.symbols(f"g1:{count + 1}")
        gbar = sum(gs) / count
        for k in range(1, count):
            window = 2 * k * (sum(gs[:k]) / k - gbar)
            product = 2 * (sum(gs[:k]) - k * gbar)
            assert sympy.simplify(window - product) == 0


@settings(max_examples=100)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12))
def test_window_rates_equal_finite_rates_bitwise(g):
    rates, holds = window_rates(DriftField.finite(g), Window(1, len(g)))
    mu = finite_rates(g)
    assert rates.values == mu.values
    assert holds == isinstance(mu, RateSequence)


def test_window_rates_constant_drift_fail_assumption():
    rates, holds = window_rates(DriftField.constant(1.0), Window(-4, 5))
    assert not holds
    assert all(v == 0 for v in rates.values)


def test_window_rates_example4_small_window():
    # oracle: the definition 2 (k - M + 1)(mean g[M..k] - mean g[M..N]) in exact rationals
    g = DriftField(0, 1, (Fraction(1), Fraction(0)), Fraction(1), Fraction(0))
    M, N = -2, 3

    def mean(a, b):
        return sum(g(i) for i in range(a, b + 1)) / (b - a + 1)

    rates, holds = window_rates(g, Window(M, N))
    for k in range(M, N):
        assert rates[k] == 2 * (k - M + 1) * (mean(M, k) - mean(M, N))
    assert rates[0] == 3
    assert holds
    # |k| pattern j - |k| with j = 3, not 2 (j + min(k, 0))
    assert list(rates.values) == [1, 2, 3, 2, 1]


@settings(max_examples=80, deadline=None)
@given(fields, st.integers(-6, 0), st.integers(1, 6), st.integers(0, 4), st.integers(0, 4))
def test_window_rates_monotone_in_nested_windows(g, M, N, dm, dn):
    small, h1 = window_rates(g, Window(M, N))
    big, h2 = window_rates(g, Window(M - dm, N + dn))
    assume(h1 and h2)
    for k in small.indices:
        assert big[k] >= small[k] - 1e-9 * max(1.0, abs(small[k]))


# --- limits --------------------------------------------------------------------

def test_limit_example5_finite_matches_partial_sums():
    g = example5()
    verdict = lambda_limit(g, geometric_strategy(2.0, 2.0), j_max=52)
    assert verdict.kind == "finite"
    for k, (kind, value) in verdict.outcomes.items():
        oracle = 2 * sum(2.0 ** (n - 1) for n in range(-400, min(k, 0) + 1))
        assert value == pytest.approx(oracle, abs=1e-6)


def test_limit_example5_square_windows_break_assumption():
    # N_j = j^2 is too small for geometric drifts: the bottom rate goes negative at j = 5
    with pytest.raises(AssumptionViolated) as info:
        lambda_limit(example5(), power_strategy(2.0), j_max=100)
    assert info.value.window == (-4, 25)


def test_limit_example4_infinite_and_monotone():
    verdict = lambda_limit(EX4, linear_strategy, indices=range(-2, 3), keep_history=True,
                           divergence=1e3, j_max=5000)
    assert verdict.kind == "infinite"
    for k, hist in verdict.history.items():
        values = [v for _, v in hist]
        assert all(b >= a for a, b in zip(values, values[1:]))
        for j, v in hist[:50]:
            assert v == pytest.approx(j - abs(k), abs=1e-9)


def test_limit_zero_drift_violates_assumption():
    with pytest.raises(AssumptionViolated):
        lambda_limit(ZERO)


def test_limit_inconclusive_when_budget_short():
    verdict = lambda_limit(EX4, linear_strategy, j_max=100)
    assert verdict.kind == "inconclusive"
    assert verdict.j_used == 100


def test_limit_verdict_json():
    obj = lambda_limit(EX4, linear_strategy, j_max=50, divergence=10).to_json()
    assert obj["kind"] == "infinite"
    assert set(obj["outcomes"]) == {str(k) for k in range(-3, 4)}


# --- parameter region --------------------------------------------------------------

def test_sigma_region_zero_drift():
    r = sigma_region(ZERO)
    assert (r.b_min, r.b_max) == (0.0, 0.0) and not r.empty
    assert r.contains(0.1, 0.0) and not r.contains(0.0, 0.0) and not r.contains(1.0, 0.01)


def test_sigma_region_example3():
    r = sigma_region(EX3)
    assert (r.b_min, r.b_max) == (-2.0, 0.0)
    assert all(r.a_min(b) == 0.0 for b in np.linspace(-2, 0, 21))
    assert r.contains(1e-9, -2.0) and r.contains(1e-9, 0.0)
    assert not r.contains(1.0, 0.001) and not r.contains(1.0, -2.001)


def test_sigma_region_example4_empty():
    r = sigma_region(EX4)
    assert r.empty and r.to_json()["empty"] is True
    assert not r.contains(100.0, -1.0)


def test_sigma_region_summable_drift():
    # one-parameter family: b = 0 and a > -min_n 2 Phi_{n+1}(g)
    g = DriftField(-2, 2, (0.5, -1.0, 0.25, -0.75, 0.5), 0.0, 0.0)
    r = sigma_region(g)
    expected = -min(2 * brute_phi(g, n + 1) for n in range(-30, 30))
    assert r.b_min == r.b_max == 0.0
    assert r.a_min(0.0) == pytest.approx(expected)


@settings(max_examples=25, deadline=None)
@given(fields, st.integers(0, 2**32 - 1))
def test_sigma_region_soundness(g, seed):
    r = sigma_region(g)
    rng = np.random.default_rng(seed)
    # rates are affine beyond the core, so far-out points settle the sign of each tail
    n = np.concatenate([np.arange(-40, 41), [-10**9, 10**9]])
    if r.empty:
        for b in np.linspace(-7, 7, 15):
            assert np.min(lambda_ab(g, 50.0, b, n)) <= 0
        return
    for _ in range(25):
        b = rng.uniform(r.b_min, r.b_max)
        a = r.a_min(b) + rng.uniform(1e-6, 3.0)
        assert np.min(lambda_ab(g, a, b, n)) > 0
    b = rng.uniform(r.b_min, r.b_max)
    # just below the a-facet: the minimising rate is exactly zero
    assert np.min(lambda_ab(g, r.a_min(b), b, n)) <= 1e-9
    for b_out in (r.b_min - 1e-2, r.b_max + 1e-2):
        assert np.min(lambda_ab(g, r.a_min(r.b_min) + 5.0, b_out, n)) <= 0


def test_sigma_region_breakpoints_are_on_the_envelope():
    g = DriftField(-2, 2, (1.0, -1.0, 2.0, 0.0, -0.5), -0.5, 1.0)
    r = sigma_region(g)
    assert len(r.breakpoints) > 2
    assert r.breakpoints[0][0] == r.b_min and r.breakpoints[-1][0] == r.b_max
    for b, a in r.breakpoints:
        assert a == pytest.approx(r.a_min(b))
    # between breakpoints a_min is affine
    for (b0, a0), (b1, a1) in zip(r.breakpoints, r.breakpoints[1:]):
        mid = (b0 + b1) / 2
        assert r.a_min(mid) == pytest.approx((a0 + a1) / 2)


# --- sampling ----------------------------------------------------------------------

def test_sample_pi_zero_drift_mean():
    # gaps are independent, so one wide window is a large sample
    z = sample_pi_ab(ZERO, 1.0, 0.0, Window(-50_000, 50_000), seed=5)
    assert np.mean(z.values) == pytest.approx(1.0, abs=0.02)
    z = sample_pi_ab(EX3, 1.0, -1.0, Window(-3, 3), seed=5)
    assert z.values.shape == (6,)


def test_sample_pi_outside_region():
    with pytest.raises(ParametersOutsideSigma):
        sample_pi_ab(ZERO, 1.0, 0.5, Window(-2, 2))
    with pytest.raises(ParametersOutsideSigma):
        sample_pi_ab(EX4, 1.0, -1.0, Window(-2, 2))


def test_sample_pi_is_deterministic():
    a = sample_pi_ab(EX3, 1.0, -1.0, Window(-5, 5), seed=42)
    b = sample_pi_ab(EX3, 1.0, -1.0, Window(-5, 5), seed=42)
    assert np.array_equal(a.values, b.values)
    c = sample_pi_ab(EX3, 1.0, -1.0, Window(-5, 5), seed=43)
    assert not np.array_equal(a.values, c.values)
