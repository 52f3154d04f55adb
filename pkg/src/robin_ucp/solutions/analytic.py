"""Closed-form solutions of Robin problems with identity coefficients."""
from __future__ import annotations

from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import integrate, optimize, special

from ..coefficients import CoefficientSet, as_points, builtin_fields, manufacture_from_solution
from .core import Solution, weak_residual

DEFAULT_R_MAX = 2.0


def _const(c):
    return lambda x: np.full(as_points(x).shape[0], float(c))


def _zero_vec(x):
    return np.zeros_like(as_points(x))


def _identity_problem(V: float, eta: float, r_max: float, name: str) -> CoefficientSet:
    base = builtin_fields("identity", {"r_max": r_max})
    return base.with_potentials(_const(V), _const(eta), dV=_zero_vec, deta=_zero_vec,
                                M=abs(V), M_eta=abs(eta), name=name)


def _solution(name, params, value, grad, hess, V, eta, r_max):
    cs = _identity_problem(V, eta, r_max, f"{name}-problem")
    return Solution(value=value, grad=grad, hess=hess, coefficients=cs, name=name,
                    provenance="analytic", params=dict(params), residual=0.0)


def homogeneous(k: int = 2, r_max: float = DEFAULT_R_MAX) -> Solution:
    """u = Re (x1 + i x2)^k: harmonic, zero Neumann data on the real axis."""
    k = int(k)
    if k < 0:
        raise ValueError("degree k must be nonnegative")

    def z(x):
        x = as_points(x)
        return x[:, 0] + 1j * x[:, 1]

    def value(x):
        return (z(x) ** k).real

    def grad(x):
        fp = k * z(x) ** (k - 1) if k >= 1 else np.zeros(as_points(x).shape[0], complex)
        return np.stack([fp.real, -fp.imag], axis=1)

    def hess(x):
        fpp = k * (k - 1) * z(x) ** (k - 2) if k >= 2 else np.zeros(as_points(x).shape[0], complex)
        out = np.empty((len(fpp), 2, 2))
        out[:, 0, 0], out[:, 0, 1] = fpp.real, -fpp.imag
        out[:, 1, 0], out[:, 1, 1] = -fpp.imag, -fpp.real
        return out

    return _solution("homogeneous", {"k": k}, value, grad, hess, 0.0, 0.0, r_max)


def _sep(name, params, fx, fxp, fxpp, gy, gyp, gypp, V, eta, r_max):
    """Separated u = f(x1) g(x2) with Du, D^2u from the factors."""

    def value(x):
        x = as_points(x)
        return fx(x[:, 0]) * gy(x[:, 1])

    def grad(x):
        x = as_points(x)
        return np.stack([fxp(x[:, 0]) * gy(x[:, 1]), fx(x[:, 0]) * gyp(x[:, 1])], axis=1)

    def hess(x):
        x = as_points(x)
        a, b = x[:, 0], x[:, 1]
        out = np.empty((len(a), 2, 2))
        out[:, 0, 0] = fxpp(a) * gy(b)
        out[:, 0, 1] = out[:, 1, 0] = fxp(a) * gyp(b)
        out[:, 1, 1] = fx(a) * gypp(b)
        return out

    return _solution(name, params, value, grad, hess, V, eta, r_max)


def robin_cosexp(k: float = 1.0, a: float | None = None, r_max: float = DEFAULT_R_MAX) -> Solution:
    """u = cos(a x1) e^{k x2} with V = k^2 - a^2 and eta = -k (a defaults to k)."""
    a = float(k) if a is None else float(a)
    k = float(k)
    return _sep("robin-cosexp", {"k": k, "a": a},
                lambda s: np.cos(a * s), lambda s: -a * np.sin(a * s), lambda s: -a * a * np.cos(a * s),
                lambda t: np.exp(k * t), lambda t: k * np.exp(k * t), lambda t: k * k * np.exp(k * t),
                k * k - a * a, -k, r_max)


def robin_cosexp_decay(k: float = 1.0, r_max: float = DEFAULT_R_MAX) -> Solution:
    """u = cos(k x1) e^{-k x2}: harmonic with eta = +k."""
    k = float(k)
    return _sep("robin-cosexp-decay", {"k": k},
                lambda s: np.cos(k * s), lambda s: -k * np.sin(k * s), lambda s: -k * k * np.cos(k * s),
                lambda t: np.exp(-k * t), lambda t: -k * np.exp(-k * t), lambda t: k * k * np.exp(-k * t),
                0.0, k, r_max)


def robin_exponential(eta0: float = 1.0, r_max: float = DEFAULT_R_MAX) -> Solution:
    """u = e^{eta0 x2} with V = eta0^2 and eta = -eta0."""
    e = float(eta0)
    one = lambda s: np.ones_like(s)
    zero = lambda s: np.zeros_like(s)
    return _sep("robin-exponential", {"eta0": e}, one, zero, zero,
                lambda t: np.exp(e * t), lambda t: e * np.exp(e * t), lambda t: e * e * np.exp(e * t),
                e * e, -e, r_max)


def cosh_exp(a: float = 1.0, b: float = 0.0, r_max: float = DEFAULT_R_MAX) -> Solution:
    """u = cosh(a x1) e^{b x2}: positive, V = a^2 + b^2, eta = -b."""
    a, b = float(a), float(b)
    return _sep("cosh-exp", {"a": a, "b": b},
                lambda s: np.cosh(a * s), lambda s: a * np.sinh(a * s), lambda s: a * a * np.cosh(a * s),
                lambda t: np.exp(b * t), lambda t: b * np.exp(b * t), lambda t: b * b * np.exp(b * t),
                a * a + b * b, -b, r_max)


def harmonic_coscosh(k: float = 1.0, r_max: float = DEFAULT_R_MAX) -> Solution:
    """u = cos(k x1) cosh(k x2): harmonic, zero Neumann data on x2 = 0."""
    k = float(k)
    return _sep("harmonic-coscosh", {"k": k},
                lambda s: np.cos(k * s), lambda s: -k * np.sin(k * s), lambda s: -k * k * np.cos(k * s),
                lambda t: np.cosh(k * t), lambda t: k * np.sinh(k * t), lambda t: k * k * np.cosh(k * t),
                0.0, 0.0, r_max)


def constant(c: float = 1.0, r_max: float = DEFAULT_R_MAX) -> Solution:
    c = float(c)
    return _sep("constant", {"c": c}, lambda s: np.full_like(s, c), np.zeros_like, np.zeros_like,
                np.ones_like, np.zeros_like, np.zeros_like, 0.0, 0.0, r_max)


# --- Robin eigenfunction of a disk ---------------------------------------------

def bessel_robin_root(sigma: float) -> float:
    """First k > 0 with k J1(k) = sigma J0(k), i.e. u'(1) = -sigma u(1) for u = J0(k s)."""
    f = lambda k: k * special.j1(k) - sigma * special.j0(k)
    j01 = special.jn_zeros(0, 1)[0]
    if sigma > 0:
        return optimize.brentq(f, 1e-12, j01 - 1e-12, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    raise ValueError("Robin constant sigma must be positive")


def shooting_robin_eigenvalue(sigma: float, s0: float = 1e-6) -> tuple[float, float]:
    """First radial eigenvalue of -Lap u = lam u on the unit disk with du/dn = -sigma u.

    Solves u'' + u'/s + lam u = 0 from the series start at s0 and finds the
    lam where u'(1) + sigma u(1) changes sign.  Returns (lam, boundary residual).
    """

    def mismatch(lam):
        u0 = 1.0 - lam * s0 * s0 / 4.0
        up0 = -lam * s0 / 2.0
        sol = integrate.solve_ivp(lambda s, y: [y[1], -y[1] / s - lam * y[0]], (s0, 1.0),
                                  [u0, up0], method="DOP853", rtol=1e-13, atol=1e-14)
        u1, up1 = sol.y[:, -1]
        return up1 + sigma * u1

    j01 = special.jn_zeros(0, 1)[0]
    lam = optimize.brentq(mismatch, 1e-10, j01**2 - 1e-6, xtol=1e-14)
    return lam, abs(mismatch(lam))


def robin_disk(sigma: float = 1.0) -> Solution:
    """u = J0(k |x - e2|) on the unit disk centred at e2, which touches the origin.

    div Du = V u with V = -k^2 and Du . n = eta u on the circle with eta = -sigma.
    The flat boundary is not part of this domain: pair it with the ``circle``
    chart of radius 1 before computing frequency quantities.
    """
    sigma = float(sigma)
    k = bessel_robin_root(sigma)
    c = np.array([0.0, 1.0])

    def value(x):
        s = np.linalg.norm(as_points(x) - c, axis=1)
        return special.j0(k * s)

    def grad(x):
        y = as_points(x) - c
        s = np.linalg.norm(y, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            # d/dx J0(k s) = -k J1(k s) y/s, and J1(k s)/s -> k/2 at the centre
            fac = np.where(s > 1e-12, -k * special.j1(k * s) / np.where(s > 0, s, 1.0), -k * k / 2)
        return fac[:, None] * y

    def inside(x):
        return np.linalg.norm(as_points(x) - c, axis=1) <= 1.0 + 1e-9

    base = builtin_fields("identity", {"r_max": 2.0})
    cs = base.with_potentials(_const(-k * k), _const(-sigma), dV=_zero_vec, deta=_zero_vec,
                              M=k * k, M_eta=sigma, name="robin-disk-problem")
    return Solution(value=value, grad=grad, coefficients=cs, name="robin-disk",
                    params={"sigma": sigma, "k": k, "eigenvalue": k * k}, residual=None,
                    inside=inside)


def manufactured(base: Solution, coefficient: str, params=None, u_min: float | None = None) -> Solution:
    """``base`` viewed as an exact solution for the named matrix field.

    V and eta are manufactured from u, so the pair solves the Robin problem
    exactly; the base solution must stay away from zero on its domain.
    """
    from ..coefficients import BUILTIN_FIELDS, _bind

    kwargs = _bind(params, BUILTIN_FIELDS[coefficient].params) if coefficient in BUILTIN_FIELDS else {}
    kwargs.setdefault("r_max", base.coefficients.domain.r_max)
    cs_A = builtin_fields(coefficient, kwargs)
    cs = manufacture_from_solution(base, cs_A, u_min=u_min)
    return Solution(value=base.value, grad=base.grad, hess=base.hess, coefficients=cs,
                    name=f"{base.name}|{coefficient}", provenance="analytic",
                    params={**base.params, "coefficients": coefficient}, residual=None)


class _Entry(NamedTuple):
    factory: Callable[..., Solution]
    params: tuple[str, ...]
    summary: str


ANALYTIC_SOLUTIONS: dict[str, _Entry] = {
    "constant": _Entry(constant, ("c", "r_max"), "u = c"),
    "cosh-exp": _Entry(cosh_exp, ("a", "b", "r_max"), "u = cosh(a x1) e^{b x2}, V = a^2+b^2, eta = -b"),
    "harmonic-coscosh": _Entry(harmonic_coscosh, ("k", "r_max"), "u = cos(k x1) cosh(k x2), eta = 0"),
    "homogeneous": _Entry(homogeneous, ("k", "r_max"), "u = Re (x1 + i x2)^k, V = 0, eta = 0"),
    "robin-cosexp": _Entry(robin_cosexp, ("k", "a", "r_max"),
                           "u = cos(a x1) e^{k x2}, V = k^2 - a^2, eta = -k"),
    "robin-cosexp-decay": _Entry(robin_cosexp_decay, ("k", "r_max"), "u = cos(k x1) e^{-k x2}, eta = +k"),
    "robin-disk": _Entry(robin_disk, ("sigma",), "J0 Robin eigenfunction of the unit disk centred at e2"),
    "robin-exponential": _Entry(robin_exponential, ("eta0", "r_max"),
                                "u = e^{eta0 x2}, V = eta0^2, eta = -eta0"),
}


def analytic_solution(name: str, params: Mapping | Sequence | None = None) -> Solution:
    """Catalogue entry by name; ``params`` is a mapping or a positional list."""
    from ..coefficients import _bind

    try:
        entry = ANALYTIC_SOLUTIONS[name]
    except KeyError:
        raise KeyError(f"unknown solution {name!r}; known: {sorted(ANALYTIC_SOLUTIONS)}") from None
    return entry.factory(**_bind(params, entry.params))


def pointwise_residuals(sol: Solution, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Strong-form residuals: div(A Du) - V u at x, and A Du.n - eta u at x projected to x2 = 0."""
    cs = sol.coefficients
    x = as_points(x)
    if sol.hess is None:
        raise ValueError("pointwise residual needs second derivatives")
    lap = np.einsum("niji,nj->n", cs.grad_A(x), sol.grad(x)) + np.einsum("nij,nij->n", cs.A(x), sol.hess(x))
    interior = lap - cs.V(x) * sol.value(x)
    xb = x.copy()
    xb[:, -1] = 0.0
    flux = np.einsum("nij,nj->ni", cs.A(xb), sol.grad(xb))
    boundary = -flux[:, -1] - cs.eta(xb) * sol.value(xb)
    return interior, boundary


def residual_of(sol: Solution) -> float:
    return sol.residual if sol.residual is not None else weak_residual(sol)
