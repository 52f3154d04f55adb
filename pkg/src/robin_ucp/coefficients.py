"""Coefficient data (A, V, eta) of the Robin problem and the scalar bounds estimates consume.

All fields are vectorised: they take an ``(n, d)`` array of points and return
``(n, d, d)`` (matrix field), ``(n,)`` (scalar field) arrays.  Derivative
arrays carry the differentiation index last, e.g. ``dA[..., i, j, k]`` is
``d a_ij / d x_k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import integrate

from .errors import DomainError, EllipticityError, ManufactureError

Field = Callable[[np.ndarray], np.ndarray]

FD_REL_STEP = 1e-5
EPS_SAMPLES_PER_ANNULUS = 64
EPS_ANNULI = 40


def as_points(x, d: int | None = None) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if d is not None and pts.shape[1] != d:
        raise ValueError(f"expected points in R^{d}, got shape {pts.shape}")
    return pts


def fd_derivative(f: Field, x: np.ndarray, rel_step: float = FD_REL_STEP) -> np.ndarray:
    """Fourth-order central differences of ``f`` at each row of ``x``.

    Step per point is ``rel_step * (1 + |x|)``.  The stencil reaches across
    x_d = 0, so ``f`` must extend smoothly a little outside the half-space.
    """
    x = as_points(x)
    n, d = x.shape
    h = rel_step * (1.0 + np.linalg.norm(x, axis=1))
    cols = []
    for k in range(d):
        step = np.zeros((n, d))
        step[:, k] = h
        fp1, fm1 = np.asarray(f(x + step)), np.asarray(f(x - step))
        fp2, fm2 = np.asarray(f(x + 2 * step)), np.asarray(f(x - 2 * step))
        hb = h.reshape((n,) + (1,) * (fp1.ndim - 1))
        cols.append((8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * hb))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class HalfBallDomain:
    """Closed half-ball {x_d >= 0, |x| <= r_max} in R^d."""

    d: int = 2
    r_max: float = 2.0

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("dimension must be at least 2")
        if not self.r_max > 0:
            raise ValueError("r_max must be positive")

    def contains(self, x, tol: float = 1e-9) -> np.ndarray:
        x = as_points(x, self.d)
        scale = tol * max(1.0, self.r_max)
        return (x[:, -1] >= -scale) & (np.linalg.norm(x, axis=1) <= self.r_max + scale)

    def require(self, x, boundary: bool = False) -> np.ndarray:
        x = as_points(x, self.d)
        inside = self.contains(x)
        if boundary:
            inside &= np.abs(x[:, -1]) <= 1e-9 * max(1.0, self.r_max)
        if not np.all(inside):
            bad = x[~inside][0]
            where = "flat boundary" if boundary else "closed half-ball"
            raise DomainError(f"point {bad.tolist()} lies outside the {where} of radius {self.r_max}")
        return x

    def sample(self, n_rad: int = 64, n_ang: int = 64) -> np.ndarray:
        """Polar sampling grid of the closed half-ball including origin and rims (d = 2)."""
        if self.d != 2:
            rng = np.random.default_rng(0)
            g = rng.normal(size=(n_rad * n_ang, self.d))
            g[:, -1] = np.abs(g[:, -1])
            g /= np.linalg.norm(g, axis=1)[:, None]
            rad = self.r_max * rng.uniform(size=(n_rad * n_ang, 1)) ** (1 / self.d)
            return np.vstack([np.zeros((1, self.d)), rad * g])
        s = np.linspace(0.0, self.r_max, n_rad)[1:]
        th = np.linspace(0.0, math.pi, n_ang)
        pts = np.stack([np.outer(s, np.cos(th)).ravel(), np.outer(s, np.sin(th)).ravel()], axis=1)
        pts[:, 1] = np.maximum(pts[:, 1], 0.0)
        return np.vstack([np.zeros((1, 2)), pts])

    def sample_boundary(self, n: int = 257) -> np.ndarray:
        if self.d != 2:
            rng = np.random.default_rng(1)
            g = rng.uniform(-1, 1, size=(n, self.d))
            g[:, -1] = 0.0
            norms = np.maximum(np.linalg.norm(g, axis=1), 1.0)
            return self.r_max * g / norms[:, None]
        t = np.linspace(-self.r_max, self.r_max, n)
        return np.stack([t, np.zeros_like(t)], axis=1)


def _zero_eps(r):
    return np.zeros_like(np.asarray(r, dtype=float))


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Fields A, V, eta with the bounds lambda, M, M_eta, eps(r), I_eps.

    ``dA``, ``dV`` and ``deta`` are optional analytic derivatives; when absent
    fourth-order central differences are used.  ``eps_modulus`` is a
    vectorised function of the radius.
    """

    A: Field
    V: Field
    eta: Field
    lam: float
    M: float
    M_eta: float
    eps_modulus: Callable = _zero_eps
    I_eps: float = 0.0
    dA: Field | None = None
    dV: Field | None = None
    deta: Field | None = None
    domain: HalfBallDomain = field(default_factory=HalfBallDomain)
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise ValueError(f"ellipticity constant must lie in (0, 1], got {self.lam}")
        if self.M < 0 or self.M_eta < 0 or self.I_eps < 0:
            raise ValueError("bounds M, M_eta, I_eps must be nonnegative")

    @property
    def d(self) -> int:
        return self.domain.d

    def grad_A(self, x) -> np.ndarray:
        x = as_points(x, self.d)
        return np.asarray(self.dA(x)) if self.dA is not None else fd_derivative(self.A, x)

    def grad_V(self, x) -> np.ndarray:
        x = as_points(x, self.d)
        return np.asarray(self.dV(x)) if self.dV is not None else fd_derivative(self.V, x)

    def grad_eta_tangential(self, x) -> np.ndarray:
        x = as_points(x, self.d)
        if self.deta is not None:
            g = np.array(self.deta(x), dtype=float)
        else:
            g = fd_derivative(self.eta, x)
        g[:, -1] = 0.0
        return g

    def eval(self, x):
        """(A, DA, V, DV) at points of the closed half-ball."""
        x = self.domain.require(x)
        return np.asarray(self.A(x)), self.grad_A(x), np.asarray(self.V(x)), self.grad_V(x)

    def eval_eta(self, x):
        """(eta, tangential D eta) at points of the flat boundary."""
        x = self.domain.require(x, boundary=True)
        return np.asarray(self.eta(x)), self.grad_eta_tangential(x)

    def with_potentials(self, V: Field, eta: Field, *, dV: Field | None = None,
                        deta: Field | None = None, M: float | None = None,
                        M_eta: float | None = None, name: str | None = None) -> "CoefficientSet":
        """Copy with new V and eta; missing bounds are estimated by sampling."""
        out = replace(self, V=V, eta=eta, dV=dV, deta=deta, M=0.0, M_eta=0.0,
                      name=name or self.name)
        if M is None or M_eta is None:
            est_M, est_Meta = potential_bounds(out)
            M = est_M if M is None else M
            M_eta = est_Meta if M_eta is None else M_eta
        return replace(out, M=float(M), M_eta=float(M_eta))

    def scaled_potentials(self, factor: float) -> "CoefficientSet":
        """V and eta multiplied by ``factor`` (bounds scale by |factor|)."""
        V, eta, dV, deta = self.V, self.eta, self.dV, self.deta
        return replace(
            self,
            V=lambda x: factor * np.asarray(V(x)),
            eta=lambda x: factor * np.asarray(eta(x)),
            dV=None if dV is None else (lambda x: factor * np.asarray(dV(x))),
            deta=None if deta is None else (lambda x: factor * np.asarray(deta(x))),
            M=abs(factor) * self.M, M_eta=abs(factor) * self.M_eta,
        )


def coefficient_gradient_norm(dA: np.ndarray) -> np.ndarray:
    """max_ij |D a_ij| per point."""
    return np.max(np.linalg.norm(dA, axis=-1), axis=(-2, -1))


def dini_integral(eps: Callable, a: float = 0.0, b: float = 1.0) -> float:
    """int_a^b eps(s)/s ds by adaptive quadrature (endpoints are never sampled)."""
    if b <= a:
        return 0.0
    val, _ = integrate.quad(lambda s: float(eps(s)) / s, a, b, limit=200, epsabs=1e-13, epsrel=1e-11)
    return val


class BoundsEstimate(NamedTuple):
    lam: float
    M: float
    M_eta: float
    eps: Callable
    I_eps: float
    annulus_radii: np.ndarray
    annulus_sups: np.ndarray


def _annulus_points(r: float, d: int) -> np.ndarray:
    if d == 2:
        rad = np.linspace(r / 2, r, 8)
        th = np.linspace(0.0, math.pi, EPS_SAMPLES_PER_ANNULUS // 8)
        pts = np.stack([np.outer(rad, np.cos(th)).ravel(), np.outer(rad, np.sin(th)).ravel()], axis=1)
        pts[:, 1] = np.maximum(pts[:, 1], 0.0)
        return pts
    rng = np.random.default_rng(7)
    g = rng.normal(size=(EPS_SAMPLES_PER_ANNULUS, d))
    g[:, -1] = np.abs(g[:, -1])
    g /= np.linalg.norm(g, axis=1)[:, None]
    rad = np.linspace(r / 2, r, EPS_SAMPLES_PER_ANNULUS)
    return rad[:, None] * g


def _eps_from_table(radii: np.ndarray, sups: np.ndarray) -> Callable:
    """Piecewise-linear-in-r modulus: eps(r) = sup_j * r / r_j on (r_j/2, r_j]."""
    slopes = sups / radii

    def eps(r):
        r = np.asarray(r, dtype=float)
        rr = np.maximum(r, 1e-300)
        j = np.floor(np.log2(radii[0] / rr) + 1e-12).astype(int)
        j = np.clip(j, 0, len(radii) - 1)
        return np.where(r > 0, slopes[j] * r, 0.0)

    return eps


def estimate_eps(cs: CoefficientSet, r_top: float | None = None, n_annuli: int = EPS_ANNULI):
    """Dyadic-annulus estimate of the Dini modulus about the origin.

    eps_j = sup over {|x| in [r_j/2, r_j]} of |x| * max_ij |D a_ij(x)|.
    Returns (eps callable, I_eps, radii, sups).  This is an estimate from 64
    samples per annulus, not a certificate.
    """
    r_top = min(1.0, cs.domain.r_max) if r_top is None else r_top
    radii = r_top * 2.0 ** -np.arange(n_annuli)
    pts = np.vstack([_annulus_points(r, cs.d) for r in radii])
    g = coefficient_gradient_norm(cs.grad_A(pts)) * np.linalg.norm(pts, axis=1)
    sups = g.reshape(n_annuli, -1).max(axis=1)
    # int_{r_j/2}^{r_j} (sup_j/r_j) dr = sup_j/2, plus the linear tail below the last annulus
    I_eps = 0.5 * math.fsum(sups.tolist()) + 0.5 * sups[-1]
    return _eps_from_table(radii, sups), float(I_eps), radii, sups


def ellipticity(A_samples: np.ndarray, sym_tol: float = 1e-10) -> float:
    asym = np.abs(A_samples - np.swapaxes(A_samples, -1, -2)).max(axis=(-2, -1))
    scale = np.abs(A_samples).max(axis=(-2, -1))
    if np.any(asym > sym_tol * np.maximum(scale, 1.0)):
        raise EllipticityError("coefficient matrix is not symmetric at a sample point")
    ev = np.linalg.eigvalsh(A_samples)
    if np.any(ev[:, 0] <= 0):
        raise EllipticityError("coefficient matrix is not positive definite at a sample point")
    return float(min(ev[:, 0].min(), 1.0 / ev[:, -1].max(), 1.0))


def potential_bounds(cs: CoefficientSet, n_rad: int = 48, n_ang: int = 48) -> tuple[float, float]:
    """Sampled W^{1,inf} norms (sup|f| + sup|Df|) of V on the domain and eta on Gamma."""
    pts = cs.domain.sample(n_rad, n_ang)
    V = np.asarray(cs.V(pts))
    dV = cs.grad_V(pts)
    M = float(np.abs(V).max() + np.linalg.norm(dV, axis=1).max())
    bpts = cs.domain.sample_boundary()
    eta = np.asarray(cs.eta(bpts))
    deta = cs.grad_eta_tangential(bpts)
    M_eta = float(np.abs(eta).max() + np.linalg.norm(deta, axis=1).max())
    return M, M_eta


def estimate_bounds(cs: CoefficientSet, sample_count: int = 4096) -> BoundsEstimate:
    """Sampled estimates (lambda, M, M_eta, eps(.), I_eps) of the coefficient bounds."""
    side = max(4, int(round(math.sqrt(sample_count))))
    pts = cs.domain.sample(side, side)
    lam = ellipticity(np.asarray(cs.A(pts)))
    M, M_eta = potential_bounds(cs, side, side)
    eps, I_eps, radii, sups = estimate_eps(cs)
    return BoundsEstimate(lam, M, M_eta, eps, I_eps, radii, sups)


def check_dini_bound(cs: CoefficientSet, n: int = 2000, seed: int = 0) -> float:
    """Largest sampled ratio |x| |DA(x)| / eps(|x|); at most 1 when the modulus is valid."""
    rng = np.random.default_rng(seed)
    r_top = min(1.0, cs.domain.r_max)
    pts = cs.domain.sample(40, 50)
    pts = pts[np.linalg.norm(pts, axis=1) <= r_top]
    extra = rng.normal(size=(n, cs.d))
    extra[:, -1] = np.abs(extra[:, -1])
    extra *= (r_top * rng.uniform(size=(n, 1)) ** 0.5) / np.linalg.norm(extra, axis=1)[:, None]
    pts = np.vstack([pts, extra])
    norms = np.linalg.norm(pts, axis=1)
    pts, norms = pts[norms > 0], norms[norms > 0]
    lhs = coefficient_gradient_norm(cs.grad_A(pts)) * norms
    rhs = np.asarray(cs.eps_modulus(norms), dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lhs > 1e-14, lhs / rhs, 0.0)
    return float(np.max(ratio))


# --- builtin catalogue -------------------------------------------------------

def _identity_matrix(x, d):
    return np.broadcast_to(np.eye(d), (x.shape[0], d, d)).copy()


def _zeros(shape):
    return lambda x: np.zeros((as_points(x).shape[0],) + shape)


def _scalar_zero(x):
    return np.zeros(as_points(x).shape[0])


def _make(name, params, A, dA, lam, eps, I_eps, d, r_max):
    return CoefficientSet(
        A=A, V=_scalar_zero, eta=_scalar_zero, lam=lam, M=0.0, M_eta=0.0,
        eps_modulus=eps, I_eps=I_eps, dA=dA, dV=_zeros((d,)), deta=_zeros((d,)),
        domain=HalfBallDomain(d, r_max), name=name, params=dict(params),
    )


def _identity(d=2, r_max=2.0):
    return _make("identity", {}, lambda x: _identity_matrix(as_points(x), d),
                 _zeros((d, d, d)), 1.0, _zero_eps, 0.0, d, r_max)


def _constant(a11=1.0, a12=0.0, a22=1.0, r_max=2.0):
    mat = np.array([[a11, a12], [a12, a22]], dtype=float)
    ev = np.linalg.eigvalsh(mat)
    if ev[0] <= 0:
        raise EllipticityError("constant matrix is not positive definite")
    lam = float(min(ev[0], 1.0 / ev[-1], 1.0))
    return _make("constant", dict(a11=a11, a12=a12, a22=a22),
                 lambda x: np.broadcast_to(mat, (as_points(x).shape[0], 2, 2)).copy(),
                 _zeros((2, 2, 2)), lam, _zero_eps, 0.0, 2, r_max)


def _block(c=0.1, d=2, r_max=2.0):
    """Tangential block I + c x'x'^T, normal entry 1 + c x_d, zero mixed entries."""
    if c < 0:
        raise ValueError("block perturbation needs c >= 0 to stay elliptic")

    def A(x):
        x = as_points(x, d)
        out = _identity_matrix(x, d)
        xt = x[:, :-1]
        out[:, :-1, :-1] += c * xt[:, :, None] * xt[:, None, :]
        out[:, -1, -1] += c * x[:, -1]
        return out

    def dA(x):
        x = as_points(x, d)
        n = x.shape[0]
        out = np.zeros((n, d, d, d))
        eye = np.eye(d)
        for i in range(d - 1):
            for j in range(d - 1):
                out[:, i, j, :] = c * (eye[i][None, :] * x[:, j:j + 1] + eye[j][None, :] * x[:, i:i + 1])
        out[:, -1, -1, -1] = c
        return out

    lam = 1.0 / (1.0 + c * max(r_max**2, r_max))
    eps = lambda r: c * np.asarray(r, dtype=float) * np.maximum(1.0, 2.0 * np.asarray(r, dtype=float))
    return _make("block", dict(c=c), A, dA, lam, eps, 1.25 * c, d, r_max)


def _lipschitz_perturb(L=0.1, d=2, r_max=2.0):
    """A = I + L diag(x_1, ..., x_d)."""
    if abs(L) * r_max >= 1:
        raise EllipticityError("|L| * r_max must be below 1 for ellipticity")

    def A(x):
        x = as_points(x, d)
        out = _identity_matrix(x, d)
        idx = np.arange(d)
        out[:, idx, idx] += L * x
        return out

    def dA(x):
        x = as_points(x, d)
        out = np.zeros((x.shape[0], d, d, d))
        for i in range(d):
            out[:, i, i, i] = L
        return out

    lam = 1.0 - abs(L) * r_max
    eps = lambda r: abs(L) * np.asarray(r, dtype=float)
    return _make("lipschitz-perturb", dict(L=L), A, dA, lam, eps, abs(L), d, r_max)


def _sin_perturb(a=0.1, r_max=2.0):
    """A = I + a sin(x_1) E_11."""
    if abs(a) >= 1:
        raise EllipticityError("|a| must be below 1")

    def A(x):
        x = as_points(x, 2)
        out = _identity_matrix(x, 2)
        out[:, 0, 0] += a * np.sin(x[:, 0])
        return out

    def dA(x):
        x = as_points(x, 2)
        out = np.zeros((x.shape[0], 2, 2, 2))
        out[:, 0, 0, 0] = a * np.cos(x[:, 0])
        return out

    eps = lambda r: abs(a) * np.asarray(r, dtype=float)
    return _make("sin-perturb", dict(a=a), A, dA, 1.0 - abs(a), eps, abs(a), 2, r_max)


def _random_poly(seed=0, amp=0.05, r_max=1.0):
    """A = I + amp * P(x), P symmetric with random quadratic entries vanishing at 0."""
    rng = np.random.default_rng(int(seed))
    lin = rng.uniform(-1, 1, size=(2, 2, 2))
    quad = rng.uniform(-1, 1, size=(2, 2, 2, 2))
    lin = 0.5 * (lin + lin.transpose(1, 0, 2))
    quad = 0.5 * (quad + quad.transpose(1, 0, 2, 3))
    quad = 0.5 * (quad + quad.transpose(0, 1, 3, 2))

    def A(x):
        x = as_points(x, 2)
        P = np.einsum("ijk,nk->nij", lin, x) + np.einsum("ijkl,nk,nl->nij", quad, x, x)
        return _identity_matrix(x, 2) + amp * P

    def dA(x):
        x = as_points(x, 2)
        return amp * (lin[None] + 2.0 * np.einsum("ijkl,nl->nijk", quad, x))

    dom = HalfBallDomain(2, r_max)
    lam = ellipticity(A(dom.sample(48, 48)))
    cs = _make("random-poly", dict(seed=seed, amp=amp), A, dA, lam, _zero_eps, 0.0, 2, r_max)
    eps, I_eps, _, _ = estimate_eps(cs)
    return replace(cs, eps_modulus=eps, I_eps=I_eps)


class _Builtin(NamedTuple):
    factory: Callable[..., CoefficientSet]
    params: tuple[str, ...]
    summary: str


BUILTIN_FIELDS: dict[str, _Builtin] = {
    "identity": _Builtin(_identity, ("d", "r_max"), "A = I, V = 0, eta = 0"),
    "constant": _Builtin(_constant, ("a11", "a12", "a22", "r_max"), "constant symmetric 2x2 matrix"),
    "block": _Builtin(_block, ("c", "d", "r_max"),
                      "block-diagonal A(0) = I: I + c x'x'^T tangentially, 1 + c x_d normally"),
    "lipschitz-perturb": _Builtin(_lipschitz_perturb, ("L", "d", "r_max"), "I + L diag(x)"),
    "sin-perturb": _Builtin(_sin_perturb, ("a", "r_max"), "I + a sin(x_1) E_11"),
    "random-poly": _Builtin(_random_poly, ("seed", "amp", "r_max"),
                            "I + amp * random symmetric quadratic (not block)"),
}


def _bind(params, names: Sequence[str]) -> dict:
    if params is None:
        return {}
    if isinstance(params, Mapping):
        unknown = set(params) - set(names)
        if unknown:
            raise ValueError(f"unknown parameter(s) {sorted(unknown)}; expected {list(names)}")
        return dict(params)
    params = list(params)
    if len(params) > len(names):
        raise ValueError(f"too many parameters: expected at most {list(names)}")
    return dict(zip(names, params))


def builtin_fields(name: str, params=None) -> CoefficientSet:
    """Named coefficient set; ``params`` is a mapping or a positional list."""
    try:
        entry = BUILTIN_FIELDS[name]
    except KeyError:
        raise KeyError(f"unknown coefficient set {name!r}; known: {sorted(BUILTIN_FIELDS)}") from None
    kwargs = _bind(params, entry.params)
    if "d" in kwargs:
        kwargs["d"] = int(kwargs["d"])
    return entry.factory(**kwargs)


# --- manufactured solutions -------------------------------------------------

def manufacture_from_solution(u, cs: CoefficientSet, u_min: float | None = None,
                              n_check: int = 64) -> CoefficientSet:
    """Coefficients making ``u`` an exact solution with the matrix field of ``cs``.

    V := div(A Du)/u in the half-ball and eta := <A Du, n>/u on Gamma with the
    outward normal n = -e_d.  ``u`` must expose ``value``, ``grad`` and
    optionally ``hess`` (central differences of ``grad`` otherwise).
    """
    pts = cs.domain.sample(n_check, n_check)
    vals = np.abs(np.asarray(u.value(pts)))
    floor = 1e-6 * vals.max() if u_min is None else u_min
    if vals.min() < floor or vals.max() == 0:
        raise ManufactureError(
            f"|u| drops to {vals.min():.3e} below the threshold {floor:.3e}; division would blow up")

    hess = u.hess if getattr(u, "hess", None) is not None else (lambda x: fd_derivative(u.grad, x))
    A, dA = cs.A, cs.grad_A

    def V(x):
        x = as_points(x)
        g = np.asarray(u.grad(x))
        # sum_ij d_i a_ij d_j u  +  a_ij d_ij u
        flux_div = np.einsum("niji,nj->n", dA(x), g) + np.einsum("nij,nij->n", A(x), hess(x))
        return flux_div / np.asarray(u.value(x))

    def eta(x):
        x = as_points(x)
        flux = np.einsum("nij,nj->ni", A(x), np.asarray(u.grad(x)))
        return -flux[:, -1] / np.asarray(u.value(x))

    name = f"manufactured[{getattr(u, 'name', 'u')}|{cs.name}]"
    return cs.with_potentials(V, eta, name=name)
