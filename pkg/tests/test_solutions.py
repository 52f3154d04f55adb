import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from robin_ucp.errors import DomainError, SingularSystemError
from robin_ucp.solutions import (
    ANALYTIC_SOLUTIONS, analytic_solution, bessel_robin_root, eval_solution, manufactured,
    pointwise_residuals, shooting_robin_eigenvalue, weak_residual,
)
from robin_ucp.solutions.fem import (
    Mesh, convergence_study, export_node_values, halfdisk_mesh, l2_error, solve_robin_fem,
)

HALF_PLANE = [n for n in ANALYTIC_SOLUTIONS if n != "robin-disk"]


@pytest.mark.parametrize("name", HALF_PLANE)
def test_catalogue_strong_residuals(name):
    u = analytic_solution(name)
    pts = u.coefficients.domain.sample(16, 16)
    interior, boundary = pointwise_residuals(u, pts)
    scale = 1 + np.abs(u.value(pts)).max()
    assert np.abs(interior).max() < 1e-10 * scale
    assert np.abs(boundary).max() < 1e-10 * scale


@pytest.mark.parametrize("name", HALF_PLANE)
def test_catalogue_weak_residuals(name):
    assert weak_residual(analytic_solution(name)) < 1e-10


@pytest.mark.parametrize("name", HALF_PLANE)
def test_gradients_match_differences(name):
    from robin_ucp.coefficients import fd_derivative

    u = analytic_solution(name)
    pts = u.coefficients.domain.sample(8, 8) * 0.9
    np.testing.assert_allclose(u.grad(pts), fd_derivative(u.value, pts), atol=1e-7)


def test_homogeneous_values():
    u = analytic_solution("homogeneous", {"k": 3})
    x = np.array([[0.5, 0.25]])
    assert u(x)[0] == pytest.approx(((0.5 + 0.25j) ** 3).real)


def test_constant_solution_is_one():
    u = analytic_solution("constant")
    assert np.all(u(np.array([[0.1, 0.2], [0.0, 0.0]])) == 1.0)


def test_zero_multiple_solves():
    u = analytic_solution("homogeneous", {"k": 2}).scaled(0.0)
    assert weak_residual(u) == 0.0


def test_eval_outside_domain_raises():
    u = analytic_solution("homogeneous", {"k": 1})
    with pytest.raises(DomainError):
        eval_solution(u, [[0.0, -0.5]])


def test_unknown_solution():
    with pytest.raises(KeyError):
        analytic_solution("unknown")


@pytest.mark.parametrize("sigma", [0.5, 1.0, 4.0])
def test_disk_eigenvalue_two_routes(sigma):
    # Bessel root against an independent ODE shooting solve
    k = bessel_robin_root(sigma)
    lam, res = shooting_robin_eigenvalue(sigma)
    assert lam == pytest.approx(k * k, rel=1e-9)
    assert res < 1e-10


def test_disk_solution_satisfies_robin_condition():
    sigma = 1.0
    u = analytic_solution("robin-disk", {"sigma": sigma})
    th = np.linspace(0, 2 * math.pi, 33)
    n = np.column_stack([np.cos(th), np.sin(th)])
    x = n + np.array([0.0, 1.0])
    flux = np.einsum("ni,ni->n", u.grad(x), n)
    np.testing.assert_allclose(flux, -sigma * u.value(x), atol=1e-12)


@pytest.mark.parametrize("coef", ["block", "lipschitz-perturb", "sin-perturb"])
def test_manufactured_variants_have_small_residual(coef):
    u = manufactured(analytic_solution("robin-exponential", {"eta0": 1.0}), coef)
    assert weak_residual(u) < 1e-8


# --- finite elements ---------------------------------------------------------------

def test_mesh_quality_and_orientation():
    m = halfdisk_mesh(1.0, 0.05)
    assert np.all(m.areas > 0)
    assert m.min_angle() > 25
    assert m.max_edge() < 2.5 * 0.05
    assert m.areas.sum() == pytest.approx(math.pi / 2, rel=5e-3)


def test_mesh_roundtrip(tmp_path):
    m = halfdisk_mesh(1.0, 0.2)
    m.save(tmp_path / "m.txt")
    m2 = Mesh.load(tmp_path / "m.txt")
    np.testing.assert_array_equal(m.nodes, m2.nodes)
    np.testing.assert_array_equal(m.elements, m2.elements)
    np.testing.assert_array_equal(m.flat_edges, m2.flat_edges)
    np.testing.assert_array_equal(m.arc_nodes, m2.arc_nodes)


def test_mesh_rejects_bad_size():
    with pytest.raises(ValueError):
        halfdisk_mesh(1.0, 2.0)


@pytest.mark.parametrize("name,params", [("harmonic-coscosh", {"k": 1}), ("robin-cosexp", {"k": 1})])
def test_fem_second_order_convergence(name, params):
    u = analytic_solution(name, params)
    errs, ratios = convergence_study(u.coefficients, u.value, hs=(0.1, 0.05, 0.025))
    assert np.all(np.diff(errs) < 0)
    assert np.all((ratios > 3.6) & (ratios < 4.4))


def test_fem_reproduces_linear_solution():
    # P1 elements are exact for u = x1 when V = 0 and eta = 0
    u = analytic_solution("homogeneous", {"k": 1})
    sol = solve_robin_fem(u.coefficients, halfdisk_mesh(1.0, 0.2), u.value)
    assert l2_error(sol, u.value) < 1e-12
    np.testing.assert_allclose(sol.grad(np.array([[0.1, 0.1]])), [[1.0, 0.0]], atol=1e-12)


def test_fem_nodal_evaluation_and_outside():
    u = analytic_solution("robin-cosexp", {"k": 1})
    m = halfdisk_mesh(1.0, 0.2)
    sol = solve_robin_fem(u.coefficients, m, u.value)
    arc = m.nodes[m.arc_nodes]
    np.testing.assert_array_equal(sol.value(arc), u.value(arc))
    with pytest.raises(DomainError):
        sol.value(np.array([[0.0, 1.5]]))
    assert not sol.inside(np.array([[0.0, 1.5]]))[0]


def test_fem_singular_system():
    u = analytic_solution("homogeneous", {"k": 1})
    m = halfdisk_mesh(1.0, 0.2)
    with pytest.raises(SingularSystemError):
        solve_robin_fem(u.coefficients, replace(m, arc_nodes=np.array([], dtype=np.int64)), u.value)


def test_fem_export(tmp_path):
    u = analytic_solution("homogeneous", {"k": 2})
    sol = solve_robin_fem(u.coefficients, halfdisk_mesh(1.0, 0.25), u.value)
    export_node_values(sol, tmp_path / "u.csv")
    lines = (tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,u"
    assert len(lines) == len(sol.mesh.nodes) + 1


def test_fem_is_deterministic():
    u = analytic_solution("robin-cosexp", {"k": 1})
    a = solve_robin_fem(u.coefficients, halfdisk_mesh(1.0, 0.1), u.value)
    b = solve_robin_fem(u.coefficients, halfdisk_mesh(1.0, 0.1), u.value)
    x = a.mesh.nodes
    assert np.array_equal(a.value(x), b.value(x))


@settings(max_examples=15, deadline=None)
@given(c=st.floats(-5, 5))
def test_weak_residual_is_scale_invariant(c):
    u = analytic_solution("robin-cosexp", {"k": 1})
    assert weak_residual(u.scaled(c)) < 1e-10
