"""Straighten a curved boundary chart and its conormal field (d = 2).

The domain near the origin is {x2 > phi(x1)} with phi(0) = phi'(0) = 0.  The
change of variables is the composite x -> z -> w -> y:

    z = (x', rho(x))                       rho: regularized distance
    w = (z' - z_d tau~(z), z_d)            tau~: extended conormal slope
    y = (w', s(x) w_d),  s = D_d rho / (mu~_d |D rho|)

followed by a constant block-diagonal linear map L with L A_y(0) L^T
proportional to I.  The equation is multiplied by det L so that the pushed
matrix equals I at the origin.

Regularized distance.  rho solves rho + phi_{c rho}(x') = x_d where phi_t is
phi averaged against the triweight kernel K(s) = (35/32)(1-s^2)^3 at scale
|t|.  On the boundary rho = 0; the averaging scale grows with the distance
so interior derivatives obey |D^{k+2} rho| rho^k <= C.

Orientation.  On {z_d = 0} the column (tau, 1) equals A_z e_d / (A_z)_dd,
the conormal direction pointing into the domain (the negative of the
outward conormal A_z(-e_d) divided by mu_d).  With this choice the
pushforward condition holds with zero residual.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Mapping, NamedTuple

import numpy as np
from scipy import optimize
from scipy.special import roots_jacobi

from .coefficients import (CoefficientSet, HalfBallDomain, as_points, ellipticity, estimate_eps,
                           fd_derivative)
from .errors import DomainError, ManufactureError, MapError

KERNEL_NAME = "triweight (35/32)(1-s^2)^3 on [-1, 1]"
_KN, _KW = roots_jacobi(16, 3.0, 3.0)
KERNEL_NODES = _KN
KERNEL_WEIGHTS = _KW / _KW.sum()
MOLLIFIER_RATIO = 0.5
NEWTON_TOL = 1e-12
NEWTON_MAXITER = 50


# --- boundary charts ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class C11Domain:
    """Local domain {x2 > phi(x1)}, |x| < chart_radius, with phi(0) = phi'(0) = 0."""

    phi: Callable[[np.ndarray], np.ndarray]
    dphi: Callable[[np.ndarray], np.ndarray]
    d2phi: Callable[[np.ndarray], np.ndarray]
    chart_radius: float = 0.5
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)
    d: int = 2

    def __post_init__(self):
        if self.d != 2:
            raise NotImplementedError("boundary charts are implemented for d = 2")
        z = np.zeros(1)
        if abs(float(self.phi(z)[0])) > 1e-14 or abs(float(self.dphi(z)[0])) > 1e-14:
            raise ValueError("chart must satisfy phi(0) = 0 and phi'(0) = 0")

    @cached_property
    def c11_norm(self) -> float:
        t = np.linspace(-self.chart_radius, self.chart_radius, 401)
        return float(np.abs(self.dphi(t)).max() + np.abs(self.d2phi(t)).max())

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        x = as_points(x, 2)
        return (x[:, 1] >= self.phi(x[:, 0]) - tol) & (np.linalg.norm(x, axis=1) <= self.chart_radius + tol)

    def boundary_points(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return np.column_stack([t, self.phi(t)])

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params), "chart_radius": self.chart_radius}


def flat_chart(chart_radius: float = 0.5) -> C11Domain:
    zero = lambda t: np.zeros_like(np.asarray(t, dtype=float))
    return C11Domain(zero, zero, zero, chart_radius, "flat", {})


def parabola_chart(a: float = 0.25, chart_radius: float = 0.5) -> C11Domain:
    """phi(x') = a |x'|^2."""
    return C11Domain(lambda t: a * np.asarray(t, float) ** 2, lambda t: 2 * a * np.asarray(t, float),
                     lambda t: np.full_like(np.asarray(t, float), 2 * a), chart_radius, "parabola", {"a": a})


def circle_chart(R: float = 1.0, chart_radius: float = 0.5) -> C11Domain:
    """phi(x') = R - sqrt(R^2 - |x'|^2): the disk of radius R centred at R e_2."""
    if chart_radius >= 0.9 * R:
        raise ValueError("chart radius must stay well inside the circle")
    return C11Domain(lambda t: R - np.sqrt(R * R - np.asarray(t, float) ** 2),
                     lambda t: np.asarray(t, float) / np.sqrt(R * R - np.asarray(t, float) ** 2),
                     lambda t: R * R / (R * R - np.asarray(t, float) ** 2) ** 1.5,
                     chart_radius, "circle", {"R": R})


CHARTS = {"flat": (flat_chart, ()), "parabola": (parabola_chart, ("a",)), "circle": (circle_chart, ("R",))}


def chart_domain(name: str, params=None, chart_radius: float = 0.5) -> C11Domain:
    from .coefficients import _bind

    try:
        factory, names = CHARTS[name]
    except KeyError:
        raise KeyError(f"unknown chart {name!r}; known: {sorted(CHARTS)}") from None
    return factory(**_bind(params, names), chart_radius=chart_radius)


# --- distances ----------------------------------------------------------------

def exact_distance(dom: C11Domain, x, maxiter: int = 60) -> np.ndarray:
    """Signed distance to the graph of phi by damped Newton projection (positive inside)."""
    x = as_points(x, 2)
    t = x[:, 0].copy()

    def obj(t):
        return (t - x[:, 0]) ** 2 + (dom.phi(t) - x[:, 1]) ** 2

    for _ in range(maxiter):
        p, dp, ddp = dom.phi(t), dom.dphi(t), dom.d2phi(t)
        g = (t - x[:, 0]) + (p - x[:, 1]) * dp
        h = 1 + dp * dp + (p - x[:, 1]) * ddp
        step = -g / np.where(h > 0.1, h, 1.0 + dp * dp)
        lam = np.ones_like(t)
        base = obj(t)
        for _ in range(30):
            bad = obj(t + lam * step) > base + 1e-300
            if not np.any(bad):
                break
            lam = np.where(bad, lam / 2, lam)
        t = t + lam * step
        if np.max(np.abs(lam * step)) < 1e-15:
            break
    dist = np.sqrt(obj(t))
    return np.where(x[:, 1] >= dom.phi(x[:, 0]), dist, -dist)


class _Mollified(NamedTuple):
    P: np.ndarray
    Px: np.ndarray
    Pt: np.ndarray
    Pxx: np.ndarray
    Pxt: np.ndarray
    Ptt: np.ndarray


def _mollified_phi(dom: C11Domain, x1: np.ndarray, t: np.ndarray, second: bool = False) -> _Mollified:
    """phi_t(x') = int phi(x' - t s) K(s) ds and its derivatives in x' and t."""
    pts = x1[:, None] - t[:, None] * KERNEL_NODES[None, :]
    W, s = KERNEL_WEIGHTS, KERNEL_NODES
    P = dom.phi(pts) @ W
    d1 = dom.dphi(pts)
    Px = d1 @ W
    Pt = -(d1 * s) @ W
    if not second:
        return _Mollified(P, Px, Pt, None, None, None)
    d2 = dom.d2phi(pts)
    return _Mollified(P, Px, Pt, d2 @ W, -(d2 * s) @ W, (d2 * s * s) @ W)


def _solve_rho(dom: C11Domain, x: np.ndarray, c: float) -> np.ndarray:
    rho = x[:, 1] - dom.phi(x[:, 0])
    for _ in range(NEWTON_MAXITER):
        m = _mollified_phi(dom, x[:, 0], c * rho)
        F = rho + m.P - x[:, 1]
        D = 1 + c * m.Pt
        if np.any(D <= 0.1):
            raise MapError("regularized distance equation lost monotonicity (chart too curved)")
        step = F / D
        rho = rho - step
        if np.max(np.abs(step)) <= 1e-15 * max(1.0, np.max(np.abs(rho))):
            break
    else:
        raise MapError("regularized distance Newton iteration did not converge")
    return rho


def regularized_distance(dom: C11Domain, x, c: float = MOLLIFIER_RATIO, check_domain: bool = True):
    """(rho, D rho, D^2 rho) at the rows of x; derivatives by implicit differentiation."""
    x = as_points(x, 2)
    if check_domain and not np.all(np.linalg.norm(x, axis=1) <= dom.chart_radius * (1 + 1e-9)):
        raise DomainError("point outside the chart")
    rho = _solve_rho(dom, x, c)
    m = _mollified_phi(dom, x[:, 0], c * rho, second=True)
    D = 1 + c * m.Pt
    r1, r2 = -m.Px / D, 1 / D
    # derivatives of D = 1 + c P_t(x', c rho)
    D1 = c * (m.Pxt + c * m.Ptt * r1)
    D2 = c * (c * m.Ptt * r2)
    r11 = -((m.Pxx + c * m.Pxt * r1) * D - m.Px * D1) / D**2
    r12 = -((c * m.Pxt * r2) * D - m.Px * D2) / D**2
    r22 = -D2 / D**2
    grad = np.column_stack([r1, r2])
    hess = np.stack([np.column_stack([r11, r12]), np.column_stack([r12, r22])], axis=1)
    return rho, grad, hess


def chart_samples(dom: C11Domain, n: int, seed: int = 0, frac: float = 0.5) -> np.ndarray:
    """n seeded points of the domain with |x| <= frac * chart_radius."""
    rng = np.random.default_rng(seed)
    R = frac * dom.chart_radius
    pts = np.empty((0, 2))
    while len(pts) < n:
        cand = rng.uniform(-R, R, (2 * n, 2))
        cand = cand[(np.linalg.norm(cand, axis=1) <= R) & (cand[:, 1] >= dom.phi(cand[:, 0]))]
        pts = np.vstack([pts, cand])
    return pts[:n]


class DistanceComparison(NamedTuple):
    c: float
    C: float
    grad_min_boundary: float
    d3_rho_times_rho: float


def compare_distances(dom: C11Domain, n: int = 400, seed: int = 0,
                      c: float = MOLLIFIER_RATIO) -> DistanceComparison:
    """Sampled constants in c d <= rho <= C d, min |D rho| on the boundary, sup |D^3 rho| rho."""
    x = chart_samples(dom, n, seed)
    x = x[x[:, 1] - dom.phi(x[:, 0]) > 1e-6]
    rho, _, _ = regularized_distance(dom, x, c)
    ratio = rho / exact_distance(dom, x)
    tb = np.linspace(-0.5, 0.5, 101) * dom.chart_radius
    _, gb, _ = regularized_distance(dom, dom.boundary_points(tb), c)
    d3 = fd_derivative(lambda p: regularized_distance(dom, p, c, check_domain=False)[2], x, rel_step=1e-5)
    return DistanceComparison(float(ratio.min()), float(ratio.max()),
                              float(np.linalg.norm(gb, axis=1).min()),
                              float((np.abs(d3).max(axis=(1, 2, 3)) * rho).max()))


# --- step (i) ------------------------------------------------------------------

class Step1(NamedTuple):
    z: np.ndarray
    J: np.ndarray
    A_z: np.ndarray
    V_z: np.ndarray
    eta_z: np.ndarray
    det: np.ndarray


def _matrix(A):
    return A.A if isinstance(A, CoefficientSet) else A


def _step1_jacobian(grad_rho: np.ndarray) -> np.ndarray:
    n = len(grad_rho)
    J = np.zeros((n, 2, 2))
    J[:, 0, 0] = 1.0
    J[:, 1, :] = grad_rho
    return J


def flatten_step1(dom: C11Domain, cs: CoefficientSet, x, c: float = MOLLIFIER_RATIO) -> Step1:
    """z = (x', rho(x)) with A_z = J A J^T / D_d rho, V_z = V / D_d rho, eta_z = eta |D rho| / D_d rho.

    eta_z is meaningful at boundary points only; it is evaluated wherever asked.
    """
    x = as_points(x, 2)
    rho, g, _ = regularized_distance(dom, x, c)
    det = g[:, 1]
    if np.any(np.abs(det) < 1e-12):
        raise MapError("D_d rho vanishes")
    J = _step1_jacobian(g)
    A = np.asarray(cs.A(x))
    A_z = _congruence(J, A) / det[:, None, None]
    V_z = np.asarray(cs.V(x)) / det
    eta_z = np.asarray(cs.eta(x)) * np.linalg.norm(g, axis=1) / det
    return Step1(np.column_stack([x[:, 0], rho]), J, A_z, V_z, eta_z, det)


# --- the composite map ------------------------------------------------------------

def _congruence(J: np.ndarray, A: np.ndarray) -> np.ndarray:
    """J A J^T per point (written out for 2x2; stacked matmul is slow for tiny matrices)."""
    if J.shape[-2:] != (2, 2):
        return J @ A @ np.swapaxes(J, -1, -2)
    j00, j01, j10, j11 = J[..., 0, 0], J[..., 0, 1], J[..., 1, 0], J[..., 1, 1]
    m00 = j00 * A[..., 0, 0] + j01 * A[..., 1, 0]
    m01 = j00 * A[..., 0, 1] + j01 * A[..., 1, 1]
    m10 = j10 * A[..., 0, 0] + j11 * A[..., 1, 0]
    m11 = j10 * A[..., 0, 1] + j11 * A[..., 1, 1]
    out = np.empty(np.broadcast_shapes(J.shape, A.shape))
    out[..., 0, 0] = m00 * j00 + m01 * j01
    out[..., 0, 1] = m00 * j10 + m01 * j11
    out[..., 1, 0] = m10 * j00 + m11 * j01
    out[..., 1, 1] = m10 * j10 + m11 * j11
    return out


def _solve_small(J: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.solve(J, b[..., None])[..., 0]


class FlatteningMap:
    """The composite Phi = L o y o w o z for a chart and a matrix field.

    Only the matrix field enters the construction; potentials V and eta do not.
    """

    def __init__(self, dom: C11Domain, A, c: float = MOLLIFIER_RATIO, normalise: bool = True):
        self.dom = dom
        self.Afield = _matrix(A)
        if isinstance(A, CoefficientSet):
            self._dA = A.grad_A
        else:
            self._dA = lambda x: fd_derivative(self.Afield, x)
        self.c = float(c)
        self.L = np.eye(2)
        self.eq_scale = 1.0
        self._cache: dict = {}
        tb = np.linspace(-dom.chart_radius, dom.chart_radius, 257)
        mu = self.mu_d(tb)
        if np.any(mu <= 0):
            raise MapError("conormal component mu_d is not positive on the boundary")
        self.mu_min = float(mu.min())
        self.A_y0 = self._pushed_matrix_unnormalised(np.zeros((1, 2)))[0]
        if abs(self.A_y0[0, 1]) > 1e-8 * np.abs(self.A_y0).max():
            raise MapError("pushed matrix at the origin is not block diagonal")
        if normalise:
            ev = np.array([self.A_y0[0, 0], self.A_y0[1, 1]])
            if np.any(ev <= 0):
                raise MapError("degenerate pushed matrix at the origin; normalisation impossible")
            self.L = np.diag(1 / np.sqrt(ev))
            self.eq_scale = float(np.linalg.det(self.L))

    # conormal data on the boundary -----------------------------------------
    def _boundary_Az(self, t: np.ndarray) -> np.ndarray:
        # on the boundary rho = 0 and D rho = (-phi', 1) exactly, so D_d rho = 1
        xb = self.dom.boundary_points(t)
        J = _step1_jacobian(np.column_stack([-self.dom.dphi(t), np.ones_like(t)]))
        A = np.asarray(self.Afield(xb))
        return _congruence(J, A)

    def boundary_data(self, t) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(tau, mu_d, tau', mu_d') on {z_d = 0}; derivatives in t by the product rule.

        With J = [[1, 0], [-p, 1]], p = phi'(t), the needed entries of J A J^T are
        (A_z)_12 = a12 - p a11 and (A_z)_22 = a22 - 2 p a12 + p^2 a11.
        """
        t = np.asarray(t, dtype=float)
        xb = self.dom.boundary_points(t)
        p, q = self.dom.dphi(t), self.dom.d2phi(t)
        A = np.asarray(self.Afield(xb))
        dA = np.asarray(self._dA(xb))
        dA_t = dA[..., 0] + p[:, None, None] * dA[..., 1]
        a11, a12, a22 = A[:, 0, 0], 0.5 * (A[:, 0, 1] + A[:, 1, 0]), A[:, 1, 1]
        b11, b12, b22 = dA_t[:, 0, 0], 0.5 * (dA_t[:, 0, 1] + dA_t[:, 1, 0]), dA_t[:, 1, 1]
        off = A[:, 0, 1] - p * a11
        doff = dA_t[:, 0, 1] - p * b11 - q * a11
        mu = a22 - 2 * p * a12 + p * p * a11
        dmu = b22 - 2 * p * b12 + p * p * b11 - 2 * q * a12 + 2 * p * q * a11
        return off / mu, mu, (doff * mu - off * dmu) / (mu * mu), dmu

    def tau(self, t) -> np.ndarray:
        """tau(z') = (A_z)_{1d} / (A_z)_{dd} on {z_d = 0}."""
        Az = self._boundary_Az(np.asarray(t, dtype=float))
        return Az[:, 0, 1] / Az[:, 1, 1]

    def mu_d(self, t) -> np.ndarray:
        """mu_d(z') = <A_z(-e_d), -e_d> on {z_d = 0}."""
        return self._boundary_Az(np.asarray(t, dtype=float))[:, 1, 1]

    def _extension(self, z: np.ndarray, grads: bool = True):
        """tau~, mu~ (and their gradients): boundary data averaged tangentially at scale z_d / 2."""
        pts = z[:, 0:1] - 0.5 * z[:, 1:2] * KERNEL_NODES[None, :]
        tau, mu, dtau, dmu = (f.reshape(pts.shape) for f in self.boundary_data(pts.ravel()))
        tt, mt = tau @ KERNEL_WEIGHTS, mu @ KERNEL_WEIGHTS
        if not grads:
            return tt, mt
        grad = lambda df: np.column_stack([df @ KERNEL_WEIGHTS, -0.5 * (df * KERNEL_NODES) @ KERNEL_WEIGHTS])
        return tt, mt, grad(dtau), grad(dmu)

    def tau_tilde(self, z) -> np.ndarray:
        return self._extension(as_points(z, 2), grads=False)[0]

    def mu_tilde(self, z) -> np.ndarray:
        return self._extension(as_points(z, 2), grads=False)[1]

    def tau_tilde_grad(self, z) -> np.ndarray:
        return self._extension(as_points(z, 2))[2]

    def mu_tilde_grad(self, z) -> np.ndarray:
        return self._extension(as_points(z, 2))[3]

    # forward pieces ---------------------------------------------------------
    def z_map(self, x) -> np.ndarray:
        x = as_points(x, 2)
        return np.column_stack([x[:, 0], _solve_rho(self.dom, x, self.c)])

    def w_map(self, z) -> np.ndarray:
        z = as_points(z, 2)
        return np.column_stack([z[:, 0] - z[:, 1] * self.tau_tilde(z), z[:, 1]])

    def scale_s(self, x) -> np.ndarray:
        """s = D_d rho / (mu~_d |D rho|), the factor in y_d = s w_d."""
        x = as_points(x, 2)
        rho, g, _ = regularized_distance(self.dom, x, self.c, check_domain=False)
        z = np.column_stack([x[:, 0], rho])
        return g[:, 1] / (self.mu_tilde(z) * np.linalg.norm(g, axis=1))

    def _y_unnormalised(self, x: np.ndarray) -> np.ndarray:
        rho, g, _ = regularized_distance(self.dom, x, self.c, check_domain=False)
        tt, mt = self._extension(np.column_stack([x[:, 0], rho]), grads=False)
        s = g[:, 1] / (mt * np.linalg.norm(g, axis=1))
        return np.column_stack([x[:, 0] - rho * tt, s * rho])

    def forward(self, x) -> np.ndarray:
        """y = Phi(x)."""
        return self._y_unnormalised(as_points(x, 2)) @ self.L.T

    __call__ = forward

    def _jacobian_unnormalised(self, x: np.ndarray) -> np.ndarray:
        rho, g, h = regularized_distance(self.dom, x, self.c, check_domain=False)
        J1 = _step1_jacobian(g)
        z = np.column_stack([x[:, 0], rho])
        tt, mu, dtt, dmu_z = self._extension(z)
        row_w = np.column_stack([1 - z[:, 1] * dtt[:, 0], -tt - z[:, 1] * dtt[:, 1]])
        # s = g_d / (mu~ |g|) differentiated with g = D rho, D g = D^2 rho
        dmu = np.einsum("nj,njk->nk", dmu_z, J1)
        gn = np.linalg.norm(g, axis=1)
        s = g[:, 1] / (mu * gn)
        ds = (h[:, 1, :] / (mu * gn)[:, None] - s[:, None] * dmu / mu[:, None]
              - s[:, None] * np.einsum("nij,ni->nj", h, g) / (gn * gn)[:, None])
        J = np.empty((len(x), 2, 2))
        J[:, 0, :] = np.einsum("nj,njk->nk", row_w, J1)
        J[:, 1, :] = rho[:, None] * ds + s[:, None] * g
        return J

    def jacobian(self, x) -> np.ndarray:
        """D Phi(x) (rows: components of y)."""
        return np.einsum("ij,njk->nik", self.L, self._jacobian_unnormalised(as_points(x, 2)))

    def _pushed_matrix_unnormalised(self, x: np.ndarray) -> np.ndarray:
        J = self._jacobian_unnormalised(x)
        A = np.asarray(self.Afield(x))
        return _congruence(J, A) / np.linalg.det(J)[:, None, None]

    # inverse ------------------------------------------------------------------
    def inverse(self, y, tol: float = NEWTON_TOL, maxiter: int = NEWTON_MAXITER) -> np.ndarray:
        """x = Phi^{-1}(y) by Newton iteration from a flat-boundary guess."""
        return self.pullback(y, tol, maxiter)[0]

    def pullback(self, y, tol: float = NEWTON_TOL, maxiter: int = NEWTON_MAXITER):
        """(Phi^{-1}(y), D Phi at Phi^{-1}(y)); memoised on the exact bytes of y."""
        y = as_points(y, 2)
        key = (y.tobytes(), tol)
        hit = self._cache.get(key)
        if hit is not None:
            return hit[0].copy(), hit[1].copy()
        yu = y @ np.linalg.inv(self.L).T
        x = np.column_stack([yu[:, 0], yu[:, 1] / max(self.scale_s(np.zeros((1, 2)))[0], 1e-12)])
        x[:, 1] += self.dom.phi(x[:, 0])
        for _ in range(maxiter):
            F = self.forward(x) - y
            err = np.max(np.abs(F))
            J = self.jacobian(x)
            if err <= tol * max(1.0, np.abs(y).max()):
                break
            x = x - _solve_small(J, F)
        else:
            raise MapError(f"inverse map did not converge (residual {err:.2e})")
        if len(self._cache) > 64:
            self._cache.clear()
        self._cache[key] = (x.copy(), J.copy())
        return x, J

    # checks ---------------------------------------------------------------------
    def pushforward_residual(self, t) -> np.ndarray:
        """Relative mismatch between (dz/dy)(D_d rho/|D rho|) e_d and the inward conormal A_z e_d."""
        t = np.asarray(t, dtype=float)
        xb = self.dom.boundary_points(t)
        rho, g, _ = regularized_distance(self.dom, xb, self.c, check_domain=False)
        J1 = _step1_jacobian(g)
        Jyx = self._jacobian_unnormalised(xb)
        # dz/dy = (dz/dx)(dx/dy)
        Jzy = np.einsum("nij,njk->nik", J1, np.linalg.inv(Jyx))
        lhs = Jzy[:, :, 1] * (g[:, 1] / np.linalg.norm(g, axis=1))[:, None]
        Az = self._boundary_Az(t)
        rhs = Az[:, :, 1]
        return np.linalg.norm(lhs - rhs, axis=1) / np.linalg.norm(rhs, axis=1)

    def extension_bounds(self, n: int = 200, seed: int = 0) -> dict:
        """Sampled sup of |D tau~| and z_d |D^2 tau~| (derivative-growth bounds with k = 1, 2)."""
        rng = np.random.default_rng(seed)
        R = self.dom.chart_radius * 0.5
        z = np.column_stack([rng.uniform(-R, R, n), rng.uniform(1e-3, R, n)])
        g1 = self.tau_tilde_grad(z)
        g2 = fd_derivative(self.tau_tilde_grad, z, rel_step=1e-4)
        out = {"k1": float(np.abs(g1).max()),
               "k2": float((z[:, 1][:, None, None] * np.abs(g2)).max())}
        if not all(math.isfinite(v) for v in out.values()):
            raise MapError("extended conormal slope fails the derivative-growth bounds")
        return out

    def jacobian_bounds(self, n: int = 400, seed: int = 0) -> dict:
        """Sampled extremes of det D Phi and sup |D^2 Phi| on the chart (points with |x| <= R/2)."""
        x = chart_samples(self.dom, n, seed)
        J = self.jacobian(x)
        det = np.linalg.det(J)
        H = fd_derivative(self.jacobian, x, rel_step=1e-4)
        Hinv = fd_derivative(lambda p: np.linalg.inv(self.jacobian(p)), x, rel_step=1e-4)
        return {"det_min": float(det.min()), "det_max": float(det.max()),
                "d2_forward": float(np.abs(H).max()), "d2_inverse_jacobian": float(np.abs(Hinv).max())}

    def sandwich_constants(self, radii=(0.1, 0.2, 0.3, 0.4, 0.5), n_ang: int = 721):
        """(c0, C0) with B+_{c0 r/2} in Phi(Omega_{r/2}) and Phi(Omega_r) in B+_{C0 r} for the radii.

        Phi(Omega_s) is bounded by the flat piece and the image of the arc
        {|x| = s} inside the domain, so the extreme values of |Phi| on that
        arc give the inner and outer radii.
        """
        inner, outer = [], []
        for r in radii:
            for s in (r / 2, r):
                arc = self._arc(s, n_ang)
                m = np.linalg.norm(self.forward(arc), axis=1)
                inner.append(m.min() / s)
                outer.append(m.max() / s)
        c0 = min(min(inner) * (1 - 1e-9), 0.999)
        C0 = max(max(outer) * (1 + 1e-9), 1.001)
        return float(c0), float(C0)

    def _arc(self, s: float, n: int) -> np.ndarray:
        if s > self.dom.chart_radius:
            raise DomainError("radius exceeds the chart")
        f = lambda th: s * math.sin(th) - float(self.dom.phi(np.array([s * math.cos(th)]))[0])
        lo = optimize.brentq(f, -0.5 * math.pi, 0.5 * math.pi, xtol=1e-15) if f(0.0) < 0 else 0.0
        hi = optimize.brentq(f, 0.5 * math.pi, 1.5 * math.pi, xtol=1e-15) if f(math.pi) < 0 else math.pi
        th = np.linspace(lo, hi, n)
        pts = s * np.column_stack([np.cos(th), np.sin(th)])
        pts[0, 1] = float(self.dom.phi(pts[:1, 0])[0])
        pts[-1, 1] = float(self.dom.phi(pts[-1:, 0])[0])
        return pts

    @property
    def metadata(self) -> dict:
        return {
            "chart": self.dom.to_dict(),
            "kernel": KERNEL_NAME,
            "kernel_nodes": len(KERNEL_NODES),
            "mollifier_ratio": self.c,
            "tangential_extension": "constant in z_d, averaged at scale z_d/2",
            "orientation": "(tau, 1) = A_z e_d / (A_z)_dd (inward conormal)",
            "normal_scaling": "y_d = D_d rho / (mu~_d |D rho|) * w_d",
            "L": self.L.tolist(),
            "equation_scale": self.eq_scale,
        }

    def to_json(self) -> str:
        return json.dumps(self.metadata, sort_keys=True)


def conormal_straighten(fmap: FlatteningMap):
    """(tau~, mu~_d, w-map, y-map) of a map; the pieces of the second step."""
    return fmap.tau_tilde, fmap.mu_tilde, fmap.w_map, fmap._y_unnormalised


# --- pushed problem and solutions ----------------------------------------------------

def block_condition_residual(cs_pushed: CoefficientSet, n: int = 64) -> float:
    """max |a_12(y', 0)| over n points of the flat boundary (zero when <A y, e_d> = 0 there)."""
    yb = cs_pushed.domain.sample_boundary(n)
    return float(np.abs(np.asarray(cs_pushed.A(yb))[:, 0, 1]).max())


def boundary_length_factor(fmap: FlatteningMap, x: np.ndarray) -> np.ndarray:
    """d sigma_x / d sigma_y at boundary points: |d x / d y_1|."""
    Jinv = np.linalg.inv(fmap.jacobian(x))
    return np.linalg.norm(Jinv[:, :, 0], axis=1)


def pushforward_problem(cs: CoefficientSet, fmap: FlatteningMap, r_max: float | None = None,
                        name: str | None = None) -> CoefficientSet:
    """Coefficients of the problem in y on the half-ball of radius r_max.

    A_y = k J A J^T / det J, V_y = k V / det J, eta_y = k eta dsigma_x/dsigma_y with
    J = D Phi and k = det L; V, eta and the bounds are sampled.
    """
    if r_max is None:
        c0, _ = fmap.sandwich_constants((fmap.dom.chart_radius,))
        r_max = 0.5 * c0 * fmap.dom.chart_radius
    k = fmap.eq_scale
    Afield = fmap.Afield

    def A(y):
        x, J = fmap.pullback(y)
        return k * _congruence(J, np.asarray(Afield(x))) / np.linalg.det(J)[:, None, None]

    def V(y):
        x, J = fmap.pullback(y)
        return k * np.asarray(cs.V(x)) / np.linalg.det(J)

    def eta(y):
        y = as_points(y, 2).copy()
        y[:, 1] = 0.0
        x, J = fmap.pullback(y)
        return k * np.asarray(cs.eta(x)) * np.linalg.norm(np.linalg.inv(J)[:, :, 0], axis=1)

    dom = HalfBallDomain(2, float(r_max))
    pts = dom.sample(24, 24)
    lam = ellipticity(A(pts))
    tmp = CoefficientSet(A=A, V=V, eta=eta, lam=lam, M=0.0, M_eta=0.0, domain=dom,
                         name=name or f"pushed[{cs.name}|{fmap.dom.name}]",
                         params={"map": fmap.metadata})
    eps, I_eps, _, _ = estimate_eps(tmp, r_top=dom.r_max, n_annuli=12)
    tmp = CoefficientSet(A=A, V=V, eta=eta, lam=lam, M=0.0, M_eta=0.0, eps_modulus=eps, I_eps=I_eps,
                         domain=dom, name=tmp.name, params=tmp.params)
    return tmp.with_potentials(V, eta, name=tmp.name)


def transform_solution(u, fmap: FlatteningMap, cs_pushed: CoefficientSet | None = None):
    """u o Phi^{-1} with gradient (D Phi)^{-T} Du, paired with the pushed coefficients."""
    from .solutions.core import Solution

    if cs_pushed is None:
        cs_pushed = pushforward_problem(u.coefficients, fmap)

    def value(y):
        return np.asarray(u.value(fmap.inverse(y)))

    def grad(y):
        x, J = fmap.pullback(y)
        return _solve_small(np.swapaxes(J, 1, 2), np.asarray(u.grad(x)))

    return Solution(value=value, grad=grad, coefficients=cs_pushed, name=f"{u.name}@{fmap.dom.name}",
                    provenance=u.provenance, params={**dict(u.params), "map": fmap.metadata},
                    h=u.h, residual=None)


def curved_robin_data(u, dom: C11Domain, u_min: float | None = None, n_check: int = 257):
    """``u`` with eta := <A Du, n>/u for the outward unit normal n of the chart boundary.

    The interior equation is untouched, so a solution of div(A Du) = V u that
    does not vanish on the curved boundary becomes an exact Robin solution on
    the chart domain.  eta is evaluated through phi'(x1), so it is meant for
    points on the graph x2 = phi(x1).
    """
    from .solutions.core import Solution

    cs = u.coefficients
    t = np.linspace(-dom.chart_radius, dom.chart_radius, n_check)
    xb = dom.boundary_points(t)
    vals = np.abs(np.asarray(u.value(xb)))
    floor = 1e-6 * vals.max() if u_min is None else u_min
    if vals.max() == 0 or vals.min() < floor:
        raise ManufactureError(f"|u| drops to {vals.min():.3e} on the curved boundary (threshold {floor:.3e})")

    def eta(x):
        x = as_points(x)
        p = dom.dphi(x[:, 0])
        n = np.column_stack([p, -np.ones_like(p)]) / np.sqrt(1 + p * p)[:, None]
        flux = np.einsum("nij,nj->ni", cs.A(x), np.asarray(u.grad(x)))
        return np.einsum("ni,ni->n", flux, n) / np.asarray(u.value(x))

    # W^{1,inf} bound of eta along the curve, by differences in arc length
    e = eta(xb)
    ds = np.hypot(np.diff(xb[:, 0]), np.diff(xb[:, 1]))
    M_eta = float(np.abs(e).max() + np.max(np.abs(np.diff(e)) / ds))
    cs_c = cs.with_potentials(cs.V, eta, dV=cs.dV, M=cs.M, M_eta=M_eta, name=f"{cs.name}|{dom.name}-boundary")
    return Solution(value=u.value, grad=u.grad, hess=u.hess, coefficients=cs_c, name=u.name,
                    provenance=u.provenance, params=dict(u.params), residual=None)
