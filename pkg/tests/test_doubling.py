import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robin_ucp.doubling_ucp import (
    BoundaryMask, boundary_doubling_ratios, boundary_stability_check, boundary_stability_entry,
    boundary_vanishing_check, constant_eta_frequency_check, constant_eta_value, doubling_report,
    halfball_mass, optimal_alpha, vanishing_order_estimate,
)
from robin_ucp.errors import DegenerateHeightError, NotApplicableError
from robin_ucp.frequency import FrequencyConfig
from robin_ucp.quadrature import QuadratureConfig
from robin_ucp.solutions import analytic_solution, manufactured
from robin_ucp.solutions.core import Solution

SMALL = QuadratureConfig(32, 64)
RHO = (0.01, 0.02, 0.05, 0.1, 1 / 6)


def homogeneous(k):
    return analytic_solution("homogeneous", {"k": k})


@pytest.mark.parametrize("k", [1, 2, 3])
def test_homogeneous_doubling_ratio(k):
    u = homogeneous(k)
    rep = doubling_report(u, u.coefficients, RHO, 3.0)
    np.testing.assert_allclose(rep.ratios, 3.0 ** (2 * k + 2), rtol=1e-12)
    assert rep.exponent == pytest.approx(2 * k + 2, rel=1e-12)
    assert rep.bound_holds()
    assert rep.sandwich.ok


def test_alpha_star_for_homogeneous():
    # N(1) = 4k at alpha = 1 with M = M_eta = 0
    a, N1 = optimal_alpha(homogeneous(2), homogeneous(2).coefficients)
    assert N1 == pytest.approx(8.0, rel=1e-12)
    assert a == pytest.approx(math.sqrt(8.0) + 1, rel=1e-12)


def test_doubling_argument_checks():
    u = homogeneous(1)
    with pytest.raises(ValueError):
        doubling_report(u, u.coefficients, RHO, 2.0)
    with pytest.raises(ValueError):
        doubling_report(u, u.coefficients, (0.5, 1.0), 3.0)
    with pytest.raises(ValueError):
        doubling_report(u, u.coefficients, (), 3.0)


def test_doubling_zero_mass():
    u = homogeneous(1).scaled(0.0)
    with pytest.raises(DegenerateHeightError):
        doubling_report(u, u.coefficients, RHO, 3.0, alpha=1.0)


def test_doubling_csv_is_stable():
    u = analytic_solution("robin-cosexp", {"k": 1})
    a = doubling_report(u, u.coefficients, RHO, 3.0).to_csv()
    b = doubling_report(u, u.coefficients, RHO, 3.0).to_csv()
    assert a == b
    assert a.splitlines()[0] == "rho,kappa_rho,h_rho,h_kappa_rho,ratio,exponent"


@pytest.mark.parametrize("name,params", [
    ("robin-cosexp", {"k": 1}), ("robin-exponential", {"eta0": 2}), ("cosh-exp", {"a": 1, "b": 1}),
])
def test_doubling_bound_and_sandwich_for_robin_cases(name, params):
    u = analytic_solution(name, params)
    rep = doubling_report(u, u.coefficients, RHO, 3.0)
    assert rep.bound_holds()
    assert rep.sandwich.ok, rep.sandwich.summary()


def test_sandwich_with_variable_matrix():
    u = manufactured(analytic_solution("robin-exponential", {"eta0": 1.0}), "block", {"c": 0.2})
    rep = doubling_report(u, u.coefficients, RHO, 3.0)
    assert rep.sandwich.ok, rep.sandwich.summary()


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_vanishing_order_of_homogeneous(k):
    u = homogeneous(k)
    rep = vanishing_order_estimate(u, u.coefficients, np.geomspace(0.01, 1.0, 7))
    assert rep.order == pytest.approx(k, abs=1e-8)
    assert not rep.nonlinear


def test_vanishing_order_of_nonvanishing_solution():
    u = analytic_solution("robin-exponential", {"eta0": 1.0})
    rep = vanishing_order_estimate(u, u.coefficients, np.geomspace(1e-3, 0.1, 7))
    assert rep.order < 0.05


def test_vanishing_grid_must_span_two_decades():
    u = homogeneous(1)
    with pytest.raises(ValueError):
        vanishing_order_estimate(u, u.coefficients, (0.1, 0.5, 1.0))


def test_vanishing_of_zero_function():
    u = homogeneous(1).scaled(0.0)
    with pytest.raises(DegenerateHeightError):
        vanishing_order_estimate(u, u.coefficients, (0.01, 1.0))


# --- constant eta ---------------------------------------------------------------------

def test_constant_eta_detection():
    assert constant_eta_value(analytic_solution("robin-exponential", {"eta0": 3.0}).coefficients) == -3.0
    with pytest.raises(NotApplicableError):
        constant_eta_value(analytic_solution("robin-cosexp-decay", {"k": 1}).coefficients)
    u = manufactured(analytic_solution("cosh-exp", {"a": 1.0, "b": 1.0}), "constant", {"a12": 0.3})
    with pytest.raises(NotApplicableError):
        constant_eta_value(u.coefficients)


def test_constant_eta_check_is_stable():
    fc = FrequencyConfig(1.0, (0.25, 0.5, 0.75, 1.0), quadrature=SMALL)
    family = [analytic_solution("robin-exponential", {"eta0": e}) for e in (1.0, 4.0, 16.0)]
    rep = constant_eta_frequency_check(family, fc)
    assert rep.ledger.ok, rep.ledger.summary()
    assert rep.stable
    assert np.all(rep.majorant_gap < 1e-12)


# --- boundary ----------------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 3])
def test_boundary_doubling_ratio(k):
    np.testing.assert_allclose(boundary_doubling_ratios(homogeneous(k), (0.05, 0.2, 0.5)), 2.0 ** (2 * k + 1),
                               rtol=1e-12)


def test_boundary_stability_shared_constant():
    family = [homogeneous(k) for k in (1, 2, 3)] + [
        analytic_solution("robin-cosexp", {"k": 1}), analytic_solution("constant")]
    entry = boundary_stability_entry(family, (0.1, 0.2, 0.4), (0.05, 0.1, 0.5))
    assert entry.ok and math.isfinite(entry.C)
    for u in family:
        for r in (0.1, 0.2, 0.4):
            res = boundary_stability_check(u, u.coefficients, r, 0.05)
            # the shared C satisfies each sample under the ledger's tolerance rule
            fixed, coeff = 0.05 * res.interior, r * res.boundary
            slack = entry.tol * (abs(res.lhs) + abs(fixed) + abs(coeff))
            assert not res.flagged and res.lhs - fixed - entry.C * coeff <= slack


def test_stability_rejects_bad_delta():
    u = homogeneous(1)
    with pytest.raises(ValueError):
        boundary_stability_check(u, u.coefficients, 0.1, 1.5)


def test_mask_density():
    mask = BoundaryMask(((0.1, 0.3), (-0.5, -0.4)))
    assert mask.density(0.2) == pytest.approx(0.1 / 0.4)
    assert mask.density(1.0) == pytest.approx(0.3 / 2.0)
    with pytest.raises(ValueError):
        BoundaryMask(((0.1, 0.3), (0.2, 0.4)))


def _bump_function(mask):
    """g(x1): sin^2 bumps on the complement intervals, zero on Sigma (not a solution)."""
    def value(x):
        t = x[:, 0]
        out = np.zeros(len(t))
        for a, b in mask.complement:
            inside = (t > a) & (t < b)
            out[inside] = np.sin(math.pi * (t[inside] - a) / (b - a)) ** 2
        return out

    return value


def test_density_point_decay_mechanism():
    ivs = tuple((2.0**-j, 2.0**-j + 4.0**-j) for j in range(2, 9))
    mask = BoundaryMask(ivs, R=1.0)
    cs = homogeneous(1).coefficients
    value = _bump_function(mask)
    fake = Solution(value, lambda x: np.zeros_like(x), cs, "bumps")
    rep = boundary_vanishing_check(fake, cs, (0.02, 0.05, 0.1, 0.2), mask)
    assert rep.applicable
    assert rep.density_entry.ok and math.isfinite(rep.density_entry.C)


def test_density_check_not_applicable_for_nonvanishing():
    mask = BoundaryMask(((0.1, 0.2),))
    u = analytic_solution("robin-exponential", {"eta0": 1.0})
    rep = boundary_vanishing_check(u, u.coefficients, (0.05, 0.1), mask)
    assert not rep.applicable


# --- properties ----------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.01, 100.0))
def test_vanishing_order_scale_invariant(c):
    u = homogeneous(2)
    grid = np.geomspace(0.01, 1.0, 5)
    a = vanishing_order_estimate(u, u.coefficients, grid, SMALL).order
    b = vanishing_order_estimate(u.scaled(c), u.coefficients, grid, SMALL).order
    assert b == pytest.approx(a, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(r=st.floats(0.01, 0.3), kappa=st.floats(2.1, 3.0))
def test_mass_is_monotone_in_radius(r, kappa):
    u = analytic_solution("robin-cosexp", {"k": 1})
    assert halfball_mass(u, kappa * r, config=SMALL) >= halfball_mass(u, r, config=SMALL)
