import math

import numpy as np
import pytest
from hypothesis import example, given, settings, strategies as st

from robin_ucp.coefficients import builtin_fields
from robin_ucp.errors import DegenerateHeightError, ResidualError
from robin_ucp.frequency import (
    FrequencyConfig, LedgerEntry, PROFILE_COLUMNS, build_profile, cauchy_schwarz_check,
    check_aux_inequalities, check_H_derivative, check_monotonicity, check_second_variation,
    check_trace_inequality, compute_moments, conformal_mu, corrected_frequency, energy_decomposition,
    energy_I, frequency_N, h_derivative_residual, height_H, merge_entries, second_variation_gap,
)
from robin_ucp.quadrature import QuadratureConfig
from robin_ucp.solutions import analytic_solution, manufactured
from robin_ucp.solutions.core import Solution

SMALL = QuadratureConfig(32, 64)
GRID = (0.25, 0.5, 0.75, 1.0)


def homogeneous(k):
    return analytic_solution("homogeneous", {"k": k})


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("alpha", [1.0, 2.0, 3.5])
def test_frequency_of_homogeneous(k, alpha):
    u = homogeneous(k)
    for r in (0.3, 1.0):
        assert frequency_N(u, u.coefficients, r, alpha) == pytest.approx(2 * (alpha + 1) * k, rel=1e-10)


def test_height_closed_forms():
    one = analytic_solution("constant")
    assert height_H(one, one.coefficients, 1.0, 1.0) == pytest.approx(math.pi / 4, rel=1e-12)
    u2 = homogeneous(2)
    assert height_H(u2, u2.coefficients, 1.0, 1.0) == pytest.approx(math.pi / 48, rel=1e-12)


def test_constant_has_zero_energy():
    one = analytic_solution("constant")
    assert energy_I(one, one.coefficients, 0.7, 1.0) == 0.0


def test_zero_solution_is_degenerate():
    u = homogeneous(1).scaled(0.0)
    with pytest.raises(DegenerateHeightError):
        frequency_N(u, u.coefficients, 0.5, 1.0)


def test_alpha_below_one_rejected():
    u = homogeneous(1)
    with pytest.raises(ValueError):
        height_H(u, u.coefficients, 0.5, 0.5)


def test_conformal_mu_needs_normalised_origin():
    cs = builtin_fields("constant", {"a11": 2.0})
    with pytest.raises(ValueError):
        conformal_mu(cs, np.zeros((1, 2)))
    assert conformal_mu(builtin_fields("block"), np.zeros((1, 2)))[0] == 1.0


@pytest.mark.parametrize("name,params", [
    ("robin-cosexp", {"k": 1}), ("robin-exponential", {"eta0": 2}), ("cosh-exp", {"a": 1, "b": 0.5}),
])
def test_energy_splits_into_three_parts(name, params):
    u = analytic_solution(name, params)
    cs = u.coefficients
    for r in (0.4, 1.0):
        dec = energy_decomposition(u, cs, r, 1.0)
        I = energy_I(u, cs, r, 1.0)
        assert dec.I1 + dec.I2 + dec.I3 == pytest.approx(I, rel=1e-10)
        assert dec.I2t >= abs(dec.I2) and dec.I3t >= abs(dec.I3)


def test_non_solution_rejected():
    u = homogeneous(2)
    fake = Solution(lambda x: u.value(x) + x[:, 1] ** 2, lambda x: u.grad(x) + np.column_stack(
        [0 * x[:, 0], 2 * x[:, 1]]), u.coefficients, "fake")
    with pytest.raises(ResidualError):
        energy_decomposition(fake, fake.coefficients, 0.5, 1.0)


def test_moments_match_single_integrals():
    u = analytic_solution("robin-cosexp", {"k": 1})
    cs = u.coefficients
    m = compute_moments(u, cs, 0.6, 2.0)
    assert m.H == pytest.approx(height_H(u, cs, 0.6, 2.0), rel=1e-12)
    assert m.I == pytest.approx(energy_I(u, cs, 0.6, 2.0), rel=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        FrequencyConfig(r_grid=())
    with pytest.raises(ValueError):
        FrequencyConfig(alpha=0.5)
    with pytest.raises(ValueError):
        FrequencyConfig(r_grid=(0.5, 0.4))
    with pytest.raises(ValueError):
        FrequencyConfig(r_grid=(0.5, 1.5))


def test_profile_columns_and_csv():
    u = homogeneous(2)
    prof = build_profile(u, u.coefficients, FrequencyConfig(1.0, GRID, quadrature=SMALL))
    np.testing.assert_allclose(prof.N, 8.0, rtol=1e-10)
    text = prof.to_csv()
    assert text.splitlines()[0] == ",".join(PROFILE_COLUMNS)
    assert len(text.splitlines()) == len(GRID) + 1
    assert text == build_profile(u, u.coefficients, FrequencyConfig(1.0, GRID, quadrature=SMALL)).to_csv()


def test_profile_refuses_radius_beyond_domain():
    u = manufactured(analytic_solution("robin-exponential", {"eta0": 1.0}), "block", {"r_max": 1.0})
    with pytest.raises(ValueError):
        build_profile(u, u.coefficients, FrequencyConfig(1.0, (0.5, 1.0)))


@pytest.mark.parametrize("k", [1, 2, 3])
def test_H_derivative_identity_for_identity_matrix(k):
    u = homogeneous(k)
    prof = build_profile(u, u.coefficients, FrequencyConfig(1.0, GRID, quadrature=SMALL))
    assert h_derivative_residual(prof).max() < 1e-8
    assert check_H_derivative(prof, u.coefficients).ok


def test_H_derivative_exact_for_block_matrix():
    u = manufactured(analytic_solution("robin-exponential", {"eta0": 1.0}), "block", {"c": 0.2})
    prof = build_profile(u, u.coefficients, FrequencyConfig(1.0, GRID, quadrature=SMALL))
    ledger = check_H_derivative(prof, u.coefficients)
    assert ledger["H_derivative_exact"].ok and ledger["H_derivative_exact"].C == 0.0
    assert ledger["H_derivative"].ok


@pytest.mark.parametrize("name,params", [
    ("homogeneous", {"k": 2}), ("robin-cosexp", {"k": 1}), ("robin-exponential", {"eta0": 2}),
    ("robin-cosexp-decay", {"k": 1}), ("harmonic-coscosh", {"k": 1}),
])
def test_auxiliary_inequalities_hold(name, params):
    u = analytic_solution(name, params)
    fc = FrequencyConfig(1.0, GRID, quadrature=SMALL)
    prof = build_profile(u, u.coefficients, fc)
    ledger = check_aux_inequalities(u, u.coefficients, fc, prof)
    ledger.add(cauchy_schwarz_check(prof))
    ledger.add(check_trace_inequality(u, u.coefficients, GRID, 1.0, (0.25, 1.0, 4.0), SMALL))
    assert ledger.ok, ledger.summary()
    assert all(math.isfinite(e.C) for e in ledger)


def test_almost_monotonicity_with_positive_eta():
    u = analytic_solution("robin-cosexp-decay", {"k": 1})
    cs = u.coefficients
    fc = FrequencyConfig(1.0, tuple(np.round(np.linspace(0.1, 1.0, 10), 12)), quadrature=SMALL)
    prof = build_profile(u, cs, fc)
    res = check_monotonicity(prof, cs, fc)
    assert res.entry.ok and 0 < res.C < math.inf
    assert res.monotone
    assert res.frequency_bound.ok
    assert np.all(np.diff(res.Ntilde) >= -1e-6 * np.abs(res.Ntilde[1:]))


def test_corrected_frequency_reduces_to_N_when_C_zero():
    cs = homogeneous(1).coefficients
    N = np.array([1.0, 2.0])
    np.testing.assert_array_equal(corrected_frequency(N, np.array([0.5, 1.0]), cs, 1.0, 0.0), N)


def test_second_variation_gap_vanishes_for_harmonic():
    u = homogeneous(3)
    prof = build_profile(u, u.coefficients, FrequencyConfig(2.0, GRID, quadrature=SMALL))
    assert second_variation_gap(prof).max() < 1e-8
    assert check_second_variation(u, u.coefficients, None, prof).ok


def test_eta_free_second_variation():
    u = analytic_solution("robin-exponential", {"eta0": 2.0})
    fc = FrequencyConfig(1.0, GRID, quadrature=SMALL)
    prof = build_profile(u, u.coefficients, fc)
    assert check_second_variation(u, u.coefficients, fc, prof, eta_free=True).ok


# --- ledger semantics ----------------------------------------------------------------

def test_ledger_violation_when_no_constant_helps():
    e = LedgerEntry("x", [1.0], [0.0], [2.0], [1.0], [0.0], 1e-12)
    assert not e.ok and e.C == math.inf and e.violations == [0]


def test_merge_requires_one_constant():
    a = LedgerEntry("a", [1.0], [0.0], [2.0], [0.0], [1.0], 1e-12)
    b = LedgerEntry("b", [1.0], [0.0], [6.0], [0.0], [2.0], 1e-12)
    assert merge_entries("ab", [a, b]).C == pytest.approx(3.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.01, 5)), min_size=1, max_size=12))
@example([(0.0, -2.7238371444875005e-11, 1.0)])
def test_fitted_constant_is_minimal(samples):
    lhs, fixed, coeff = map(np.array, zip(*samples))
    e = LedgerEntry("p", np.ones(len(lhs)), np.zeros(len(lhs)), lhs, fixed, coeff, 1e-12)
    assert e.ok
    assert e.holds_with(e.C)
    if e.C > 0:
        assert not e.holds_with(e.C * (1 - 1e-6))


# --- properties -----------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.01, 100), r=st.floats(0.1, 1.0))
def test_frequency_is_scale_invariant(c, r):
    u = analytic_solution("robin-cosexp", {"k": 1})
    cs = u.coefficients
    assert frequency_N(u.scaled(c), cs, r, 1.0, SMALL) == pytest.approx(frequency_N(u, cs, r, 1.0, SMALL),
                                                                        rel=1e-11)


@settings(max_examples=20, deadline=None)
@given(k=st.integers(1, 4), alpha=st.floats(1.0, 4.0), r=st.floats(0.05, 1.0))
def test_homogeneous_frequency_property(k, alpha, r):
    u = homogeneous(k)
    assert frequency_N(u, u.coefficients, r, alpha, SMALL) == pytest.approx(2 * (alpha + 1) * k, rel=1e-9)


@settings(max_examples=15, deadline=None)
@given(r=st.floats(0.1, 1.0), alpha=st.floats(1.0, 3.0))
def test_cauchy_schwarz_property(r, alpha):
    u = analytic_solution("robin-exponential", {"eta0": 1.5})
    m = compute_moments(u, u.coefficients, r, alpha, SMALL)
    assert m.I**2 <= 4 * (alpha + 1) ** 2 * m.S * m.H * (1 + 1e-10)
