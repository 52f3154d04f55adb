"""The Solution container, point evaluation and the weak-form residual."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping

import numpy as np

from ..coefficients import CoefficientSet, as_points
from ..errors import DomainError
from ..quadrature import QuadratureConfig, weighted_boundary_integral, weighted_halfball_integral

Field = Callable[[np.ndarray], np.ndarray]

RESIDUAL_CONFIG = QuadratureConfig(48, 96)


@dataclass(frozen=True, eq=False)
class Solution:
    """A scalar field u with gradient access and the problem it solves.

    ``value`` maps ``(n, d)`` points to ``(n,)``; ``grad`` to ``(n, d)`` and
    the optional ``hess`` to ``(n, d, d)``.  ``provenance`` is ``"analytic"``
    or ``"fem"``; ``h`` is the mesh size for finite-element solutions.
    """

    value: Field
    grad: Field
    coefficients: CoefficientSet
    name: str
    provenance: str = "analytic"
    params: Mapping[str, Any] = field(default_factory=dict)
    hess: Field | None = None
    h: float | None = None
    mesh: Any = None
    residual: float | None = None
    inside: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self.value(as_points(x)))

    @property
    def d(self) -> int:
        return self.coefficients.d

    def scaled(self, c: float) -> "Solution":
        """c * u; solves the same (linear) problem."""
        v, g, hs = self.value, self.grad, self.hess
        return replace(
            self,
            value=lambda x: c * np.asarray(v(x)),
            grad=lambda x: c * np.asarray(g(x)),
            hess=None if hs is None else (lambda x: c * np.asarray(hs(x))),
        )

    def with_coefficients(self, cs: CoefficientSet, residual: float | None = None) -> "Solution":
        return replace(self, coefficients=cs, residual=residual)


def eval_solution(sol: Solution, x):
    """(u, Du) at points inside the solution's domain."""
    x = as_points(x, sol.d)
    inside = sol.inside(x) if sol.inside is not None else sol.coefficients.domain.contains(x)
    if not np.all(inside):
        raise DomainError(f"point {x[~inside][0].tolist()} lies outside the domain of {sol.name}")
    return np.asarray(sol.value(x)), np.asarray(sol.grad(x))


def _test_monomials(d: int, degree: int):
    if d != 2:
        raise NotImplementedError("weak residual test functions are provided for d = 2")
    return [(a, b) for n in range(degree + 1) for a in range(n + 1) for b in [n - a]]


def weak_residual_terms(sol: Solution, cs: CoefficientSet, R: float, degree: int = 3,
                        config: QuadratureConfig = RESIDUAL_CONFIG) -> np.ndarray:
    """Rows (a(u, psi_m), scale_m) for psi_m = (R^2 - |x|^2) x1^a x2^b.

    a(u, psi) = int A Du . D psi + V u psi - int_Gamma eta u psi is zero for
    weak solutions of div(A Du) = V u with A Du . n = eta u on the flat part;
    psi vanishes on the arc |x| = R so no other boundary term appears.
    """
    rows = []
    for a, b in _test_monomials(cs.d, degree):
        q = lambda x, a=a, b=b: x[:, 0] ** a * x[:, 1] ** b

        def dq(x, a=a, b=b):
            out = np.zeros_like(x)
            if a:
                out[:, 0] = a * x[:, 0] ** (a - 1) * x[:, 1] ** b
            if b:
                out[:, 1] = b * x[:, 0] ** a * x[:, 1] ** (b - 1)
            return out

        def flux(x):
            return np.einsum("nij,nj->ni", cs.A(x), sol.grad(x))

        # D psi = -2 x q + (R^2-|x|^2) Dq: split into a p=0 and a p=1 integral
        t1 = lambda x: -2.0 * np.einsum("ni,ni->n", flux(x), x) * q(x)
        t2 = lambda x: np.einsum("ni,ni->n", flux(x), dq(x)) + cs.V(x) * sol.value(x) * q(x)
        tb = lambda x: cs.eta(x) * sol.value(x) * q(x)
        s1 = weighted_halfball_integral(t1, R, 0.0, config=config)
        s2 = weighted_halfball_integral(t2, R, 1.0, config=config)
        sb = weighted_boundary_integral(tb, R, 1.0, config=config)
        a1 = weighted_halfball_integral(lambda x: np.abs(t1(x)), R, 0.0, config=config)
        a2 = weighted_halfball_integral(lambda x: np.abs(t2(x)), R, 1.0, config=config)
        ab = weighted_boundary_integral(lambda x: np.abs(tb(x)), R, 1.0, config=config)
        rows.append((s1 + s2 - sb, a1 + a2 + ab))
    return np.array(rows)


def weak_residual(sol: Solution, cs: CoefficientSet | None = None, R: float = 1.0,
                  degree: int = 3, config: QuadratureConfig = RESIDUAL_CONFIG) -> float:
    """Largest relative weak-form residual |a(u, psi)| / sum |terms| over the test family."""
    cs = sol.coefficients if cs is None else cs
    rows = weak_residual_terms(sol, cs, R, degree, config)
    scale = rows[:, 1]
    if np.all(scale == 0):
        return 0.0
    return float(np.max(np.abs(rows[:, 0]) / np.maximum(scale, np.finfo(float).tiny)))
