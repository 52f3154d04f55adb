import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robin_ucp.coefficients import (
    BUILTIN_FIELDS, HalfBallDomain, builtin_fields, check_dini_bound, dini_integral, ellipticity,
    estimate_bounds, estimate_eps, fd_derivative, manufacture_from_solution,
)
from robin_ucp.errors import DomainError, EllipticityError, ManufactureError
from robin_ucp.solutions import analytic_solution, pointwise_residuals


def test_identity_bounds():
    cs = builtin_fields("identity")
    est = estimate_bounds(cs)
    assert cs.lam == 1.0
    assert est.M == 0.0 and est.M_eta == 0.0
    assert est.I_eps == 0.0


def test_constant_field_values():
    cs = builtin_fields("constant", {"a11": 2.0, "a12": 0.5, "a22": 1.0})
    A = cs.A(np.array([[0.3, 0.2]]))[0]
    np.testing.assert_array_equal(A, [[2.0, 0.5], [0.5, 1.0]])
    assert cs.I_eps == 0.0


def test_block_lambda_and_dini():
    cs = builtin_fields("block", {"c": 0.2})
    assert cs.I_eps == pytest.approx(1.25 * 0.2)
    assert check_dini_bound(cs) <= 1.0 + 1e-9
    pts = cs.domain.sample(16, 16)
    assert ellipticity(cs.A(pts)) >= cs.lam * (1 - 1e-12)


@pytest.mark.parametrize("name", sorted(BUILTIN_FIELDS))
def test_builtins_are_elliptic_and_symmetric(name):
    cs = builtin_fields(name)
    pts = cs.domain.sample(16, 16)
    A = cs.A(pts)
    np.testing.assert_allclose(A, np.swapaxes(A, 1, 2), atol=1e-14)
    assert ellipticity(A) > 0


@pytest.mark.parametrize("name", sorted(BUILTIN_FIELDS))
def test_analytic_derivative_matches_differences(name):
    cs = builtin_fields(name)
    if cs.dA is None:
        pytest.skip("no analytic derivative")
    pts = cs.domain.sample(8, 8)
    np.testing.assert_allclose(cs.dA(pts), fd_derivative(cs.A, pts), atol=1e-8)


def test_unknown_names_and_params():
    with pytest.raises(KeyError):
        builtin_fields("nope")
    with pytest.raises(ValueError):
        builtin_fields("block", {"zz": 1.0})


def test_ellipticity_rejects_bad_matrices():
    with pytest.raises(EllipticityError):
        ellipticity(np.array([[[1.0, 0.2], [0.0, 1.0]]]))
    with pytest.raises(EllipticityError):
        ellipticity(np.array([[[1.0, 0.0], [0.0, -1.0]]]))


def test_domain_checks():
    dom = HalfBallDomain(2, 1.0)
    with pytest.raises(DomainError):
        dom.require([[0.0, -0.5]])
    with pytest.raises(DomainError):
        dom.require([[0.3, 0.1]], boundary=True)
    assert dom.contains([[0.0, 1.0]])[0]
    with pytest.raises(ValueError):
        HalfBallDomain(2, 0.0)


def test_eval_refuses_points_outside():
    cs = builtin_fields("identity")
    with pytest.raises(DomainError):
        cs.eval(np.array([[0.0, -1.0]]))


def test_dini_integral_linear_modulus():
    assert dini_integral(lambda r: 3 * r, 0.0, 1.0) == pytest.approx(3.0)


def test_estimate_eps_constant_field_is_zero():
    eps, I_eps, radii, sups = estimate_eps(builtin_fields("constant", {"a12": 0.3}))
    assert I_eps == 0.0
    assert np.all(eps(radii) == 0)


def test_manufactured_potentials_close_the_equation():
    base = analytic_solution("robin-exponential", {"eta0": 1.0})
    cs = manufacture_from_solution(base, builtin_fields("lipschitz-perturb", {"L": 0.2}))
    from robin_ucp.solutions.core import Solution

    u = Solution(base.value, base.grad, cs, "m", hess=base.hess)
    pts = cs.domain.sample(12, 12)
    interior, boundary = pointwise_residuals(u, pts)
    assert np.abs(interior).max() < 1e-6
    assert np.abs(boundary).max() < 1e-8


def test_manufacture_refuses_vanishing_u():
    u = analytic_solution("homogeneous", {"k": 1})
    with pytest.raises(ManufactureError):
        manufacture_from_solution(u, builtin_fields("block"))


@settings(max_examples=25, deadline=None)
@given(factor=st.floats(-3.0, 3.0).filter(lambda f: abs(f) > 1e-3))
def test_scaled_potential_bounds_scale(factor):
    cs = analytic_solution("robin-exponential", {"eta0": 1.0}).coefficients
    sc = cs.scaled_potentials(factor)
    assert sc.M == pytest.approx(abs(factor) * cs.M)
    assert sc.M_eta == pytest.approx(abs(factor) * cs.M_eta)
    x = np.array([[0.1, 0.0]])
    assert sc.eta(x)[0] == pytest.approx(factor * cs.eta(x)[0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_poly_is_elliptic(seed):
    cs = builtin_fields("random-poly", {"seed": seed})
    pts = cs.domain.sample(8, 8)
    assert ellipticity(cs.A(pts)) > 0
    assert math.isfinite(cs.I_eps)
