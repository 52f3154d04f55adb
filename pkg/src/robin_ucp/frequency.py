"""Weighted height, energy and frequency of a solution on half-balls B_r^+.

With w = r^2 - |x|^2 and the conformal factor mu = <Ax, x>/|x|^2,

    H(r) = int u^2 w^alpha mu,        I(r) = 2(alpha+1) int <A Du, x> u w^alpha,
    N(r) = I(r) / H(r).

Testing the equation with u w^(alpha+1) splits I into

    I1 = int <A Du, Du> w^(alpha+1),  I2 = int V u^2 w^(alpha+1),
    I3 = -int_Gamma eta u^2 w^(alpha+1),

and the majorants I2~, I3~ use |V| and |eta|.  Every inequality that links
these quantities is checked numerically through an :class:`InequalityLedger`
whose constants are the smallest values that make the sampled inequality
hold.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .coefficients import CoefficientSet, as_points, dini_integral
from .errors import DegenerateHeightError, ResidualError
from .quadrature import (DEFAULT_CONFIG, QuadratureConfig, accumulate, boundary_rule, halfball_rule,
                         weighted_boundary_integral, weighted_halfball_integral)

H_REL_THRESHOLD = 1e-14
FD_STEP = 1e-3
RESIDUAL_TOL = 1e-6
ORIGIN_TOL = 1e-10


# --- conformal factor and the field beta --------------------------------------

def _matrix_field(A):
    return A.A if isinstance(A, CoefficientSet) else A


def _check_origin_normalisation(Afield, d):
    A0 = np.asarray(Afield(np.zeros((1, d))))[0]
    if np.max(np.abs(A0 - np.eye(d))) > ORIGIN_TOL:
        raise ValueError("mu(0) is only defined when A(0) = I")


def conformal_mu(A, x) -> np.ndarray:
    """mu(x) = <A(x)x, x>/|x|^2, with the limit mu(0) = 1 when A(0) = I."""
    Afield = _matrix_field(A)
    x = as_points(x)
    r2 = np.einsum("ni,ni->n", x, x)
    zero = r2 == 0
    if np.any(zero):
        _check_origin_normalisation(Afield, x.shape[1])
    Ax = np.einsum("nij,nj->ni", np.asarray(Afield(x)), x)
    out = np.ones(len(x))
    nz = ~zero
    out[nz] = np.einsum("ni,ni->n", Ax[nz], x[nz]) / r2[nz]
    return out


def beta_field(cs: CoefficientSet, x):
    """beta = A x / mu and its Jacobian Dbeta[n, k, i] = d beta_k / d x_i.

    beta . x = |x|^2 by construction.  At x = 0 the limits beta = 0, Dbeta = I
    are returned (they need A(0) = I).
    """
    x = as_points(x, cs.d)
    d = x.shape[1]
    A = np.asarray(cs.A(x))
    dA = cs.grad_A(x)
    r2 = np.einsum("ni,ni->n", x, x)
    zero = r2 == 0
    if np.any(zero):
        _check_origin_normalisation(cs.A, d)
    safe_r2 = np.where(zero, 1.0, r2)
    Ax = np.einsum("nij,nj->ni", A, x)
    xAx = np.einsum("ni,ni->n", Ax, x)
    mu = np.where(zero, 1.0, xAx / safe_r2)
    beta = Ax / mu[:, None]
    # d_i mu = [(d_i a_jk) x_j x_k + 2 (Ax)_i]/|x|^2 - 2 <Ax,x> x_i/|x|^4
    dmu = (np.einsum("njki,nj,nk->ni", dA, x, x) + 2 * Ax) / safe_r2[:, None] \
        - 2 * (xAx / safe_r2**2)[:, None] * x
    # d_i beta_k = (d_i a_kl) x_l/mu + a_ki/mu - (Ax)_k d_i mu/mu^2
    Dbeta = (np.einsum("nkli,nl->nki", dA, x) + A) / mu[:, None, None] \
        - Ax[:, :, None] * dmu[:, None, :] / (mu**2)[:, None, None]
    if np.any(zero):
        beta[zero] = 0.0
        Dbeta[zero] = np.eye(d)
    return beta, Dbeta


# --- single-quantity integrals ------------------------------------------------

def _check_args(r, alpha):
    if not 0 < r:
        raise ValueError("radius must be positive")
    if alpha < 1:
        raise ValueError("alpha must be at least 1")


def _flux(u, A, x):
    return np.einsum("nij,nj->ni", np.asarray(A(x)), np.asarray(u.grad(x)))


def height_H(u, A, r: float, alpha: float, config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """H(r) = int_{B_r^+} u^2 (r^2-|x|^2)^alpha mu."""
    _check_args(r, alpha)
    Afield = _matrix_field(A)
    d = A.d if isinstance(A, CoefficientSet) else u.d
    return weighted_halfball_integral(lambda x: np.asarray(u.value(x)) ** 2 * conformal_mu(Afield, x),
                                      r, alpha, d=d, config=config)


def energy_I(u, A, r: float, alpha: float, config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """I(r) = 2(alpha+1) int_{B_r^+} <A Du, x> u (r^2-|x|^2)^alpha."""
    _check_args(r, alpha)
    Afield = _matrix_field(A)
    d = A.d if isinstance(A, CoefficientSet) else u.d

    def f(x):
        return np.einsum("ni,ni->n", _flux(u, Afield, x), x) * np.asarray(u.value(x))

    return 2 * (alpha + 1) * weighted_halfball_integral(f, r, alpha, d=d, config=config)


def _require_solution(u, cs: CoefficientSet, tol: float) -> float:
    """Weak-form residual of (u, cs); cached on the solution for its own coefficients."""
    from .solutions.core import weak_residual

    if cs is u.coefficients and u.residual is not None:
        res = u.residual
    else:
        cache = u.__dict__.setdefault("_residual_cache", {})
        key = id(cs)
        if key not in cache:
            R = min(1.0, cs.domain.r_max)
            cache[key] = (cs, weak_residual(u, cs, R=R))
        res = cache[key][1]
    if res > tol:
        raise ResidualError(f"weak-form residual {res:.3e} exceeds {tol:.1e}; "
                            "the energy decomposition holds only for solutions")
    return res


class Decomposition(NamedTuple):
    I1: float
    I2: float
    I3: float
    I2t: float
    I3t: float


def energy_decomposition(u, cs: CoefficientSet, r: float, alpha: float,
                         config: QuadratureConfig = DEFAULT_CONFIG,
                         residual_tol: float = RESIDUAL_TOL) -> Decomposition:
    """(I1, I2, I3, I2~, I3~); refuses functions that do not solve the problem."""
    _check_args(r, alpha)
    _require_solution(u, cs, residual_tol)
    p = alpha + 1
    d = cs.d
    I1 = weighted_halfball_integral(
        lambda x: np.einsum("ni,ni->n", _flux(u, cs.A, x), np.asarray(u.grad(x))), r, p, d=d, config=config)
    I2 = weighted_halfball_integral(lambda x: cs.V(x) * np.asarray(u.value(x)) ** 2, r, p, d=d, config=config)
    I2t = weighted_halfball_integral(lambda x: np.abs(cs.V(x)) * np.asarray(u.value(x)) ** 2,
                                     r, p, d=d, config=config)
    I3 = -weighted_boundary_integral(lambda x: cs.eta(x) * np.asarray(u.value(x)) ** 2,
                                     r, p, d=d, config=config)
    I3t = weighted_boundary_integral(lambda x: np.abs(cs.eta(x)) * np.asarray(u.value(x)) ** 2,
                                     r, p, d=d, config=config)
    return Decomposition(I1, I2, I3, I2t, I3t)


def frequency_N(u, cs: CoefficientSet, r: float, alpha: float,
                config: QuadratureConfig = DEFAULT_CONFIG, h_floor: float = 0.0) -> float:
    """N(r) = I(r)/H(r); raises when H(r) <= h_floor."""
    H = height_H(u, cs, r, alpha, config)
    if not H > h_floor:
        raise DegenerateHeightError(f"H({r}) = {H:.3e} is at or below the threshold {h_floor:.3e}")
    return energy_I(u, cs, r, alpha, config) / H


# --- all moments from one rule -----------------------------------------------

class Moments(NamedTuple):
    """Every integral at one (r, alpha).

    P = alpha^2 int u^2 w^(alpha-1) |x|^2, S = int <A Du, x>^2 mu^-1 w^alpha,
    E = int u^2 [d(1-mu) + tr(A-I) + x_j d_i a_ij] w^alpha, T = int_Gamma u^2 w^(alpha+1),
    B = int_Gamma u^2 |beta . D_T eta| w^(alpha+1).
    """

    H: float
    I: float
    I1: float
    I2: float
    I3: float
    I2t: float
    I3t: float
    P: float
    S: float
    E: float
    T: float
    B: float


def compute_moments(u, cs: CoefficientSet, r: float, alpha: float,
                    config: QuadratureConfig = DEFAULT_CONFIG) -> Moments:
    """All quantities at radius r from a single rule for the weight w^(alpha-1).

    Higher powers of w are polynomial factors in the integrand, which the
    Gauss-Jacobi rule integrates with the same accuracy.
    """
    _check_args(r, alpha)
    d = cs.d
    rule = halfball_rule(d, float(alpha - 1), config.n_rad, config.n_ang)
    x, wq = rule.scaled(r)
    w = r * r - np.einsum("ni,ni->n", x, x)
    uval = np.asarray(u.value(x))
    Du = np.asarray(u.grad(x))
    A = np.asarray(cs.A(x))
    dA = cs.grad_A(x)
    V = np.asarray(cs.V(x))
    mu = conformal_mu(cs.A, x)
    flux = np.einsum("nij,nj->ni", A, Du)
    fx = np.einsum("ni,ni->n", flux, x)
    u2 = uval * uval
    wa = w  # w^alpha against a rule that already carries w^(alpha-1)
    H = accumulate(wq, u2 * mu * wa)
    I = 2 * (alpha + 1) * accumulate(wq, fx * uval * wa)
    w2 = wa * w
    I1 = accumulate(wq, np.einsum("ni,ni->n", flux, Du) * w2)
    I2 = accumulate(wq, V * u2 * w2)
    I2t = accumulate(wq, np.abs(V) * u2 * w2)
    P = alpha**2 * accumulate(wq, u2 * np.einsum("ni,ni->n", x, x))
    S = accumulate(wq, fx * fx / mu * wa)
    corr = d * (1 - mu) + np.trace(A - np.eye(d), axis1=1, axis2=2) + np.einsum("niji,nj->n", dA, x)
    E = accumulate(wq, u2 * corr * wa)

    brule = boundary_rule(d, float(alpha + 1), config.boundary_nodes, config.n_ang)
    xb, wb = brule.scaled(r)
    ub2 = np.asarray(u.value(xb)) ** 2
    eta = np.asarray(cs.eta(xb))
    beta, _ = beta_field(cs, xb)
    bdeta = np.abs(np.einsum("ni,ni->n", beta, cs.grad_eta_tangential(xb)))
    I3 = -accumulate(wb, eta * ub2)
    I3t = accumulate(wb, np.abs(eta) * ub2)
    T = accumulate(wb, ub2)
    B = accumulate(wb, bdeta * ub2)
    return Moments(H, I, I1, I2, I3, I2t, I3t, P, S, E, T, B)


# --- configuration and profiles ----------------------------------------------

@dataclass(frozen=True)
class FrequencyConfig:
    alpha: float = 1.0
    r_grid: tuple = tuple(np.round(np.linspace(0.1, 1.0, 10), 12))
    fd_step: float = FD_STEP
    quadrature: QuadratureConfig = DEFAULT_CONFIG

    def __post_init__(self):
        grid = tuple(float(r) for r in self.r_grid)
        object.__setattr__(self, "r_grid", grid)
        if self.alpha < 1:
            raise ValueError("alpha must be at least 1")
        if not grid:
            raise ValueError("radius grid is empty")
        if any(not 0 < r <= 1 for r in grid):
            raise ValueError("radii must lie in (0, 1]")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("radius grid must be strictly increasing")
        if not 0 < self.fd_step < 0.5:
            raise ValueError("finite-difference step must lie in (0, 0.5)")


def _richardson(f: Callable[[float], float], r: float, step: float) -> float:
    """Central difference with step h = step*r, improved by one Richardson level."""
    h = step * r
    d1 = (f(r + h) - f(r - h)) / (2 * h)
    d2 = (f(r + h / 2) - f(r - h / 2)) / h
    return (4 * d2 - d1) / 3


PROFILE_COLUMNS = ("r", "H", "I", "I1", "I2", "I3", "I2tilde", "I3tilde", "N",
                   "Hprime", "Iprime", "Nprime", "Ntilde", "valid")


@dataclass(frozen=True, eq=False)
class FrequencyProfile:
    """Per-radius columns of the frequency quantities; ``moments`` keeps the auxiliary integrals."""

    alpha: float
    r: np.ndarray
    moments: tuple
    Hprime: np.ndarray
    Iprime: np.ndarray
    valid: np.ndarray
    Ntilde: np.ndarray
    ntilde_C: float = 0.0
    d: int = 2

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.moments])

    @property
    def H(self):
        return self.column("H")

    @property
    def I(self):
        return self.column("I")

    @property
    def N(self):
        H, I = self.H, self.I
        return np.where(self.valid, I / np.where(self.valid, H, 1.0), np.nan)

    @property
    def Nprime(self):
        H, I = self.H, self.I
        Hs = np.where(self.valid, H, 1.0)
        return np.where(self.valid, (self.Iprime * H - I * self.Hprime) / Hs**2, np.nan)

    def rows(self):
        cols = {
            "r": self.r, "H": self.H, "I": self.I, "I1": self.column("I1"), "I2": self.column("I2"),
            "I3": self.column("I3"), "I2tilde": self.column("I2t"), "I3tilde": self.column("I3t"),
            "N": self.N, "Hprime": self.Hprime, "Iprime": self.Iprime, "Nprime": self.Nprime,
            "Ntilde": self.Ntilde, "valid": self.valid.astype(int),
        }
        for i in range(len(self.r)):
            yield [cols[c][i] for c in PROFILE_COLUMNS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(PROFILE_COLUMNS)
        for row in self.rows():
            writer.writerow([repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v))
                             for v in row])
        return buf.getvalue()


def build_profile(u, cs: CoefficientSet, fc: FrequencyConfig,
                  residual_tol: float | None = RESIDUAL_TOL) -> FrequencyProfile:
    """Sweep the radius grid; H', I' by Richardson-improved central differences.

    Radii with H below 1e-14 * max H are flagged invalid and carry no N.
    ``residual_tol=None`` skips the solution check (for non-solutions).
    """
    if not fc.r_grid:
        raise ValueError("radius grid is empty")
    if residual_tol is not None:
        _require_solution(u, cs, residual_tol)
    top = fc.r_grid[-1] * (1 + fc.fd_step)
    if top > cs.domain.r_max * (1 + 1e-12):
        raise ValueError(f"finite differences at r={fc.r_grid[-1]} leave the domain of radius {cs.domain.r_max}")
    alpha, q = fc.alpha, fc.quadrature
    moments = tuple(compute_moments(u, cs, r, alpha, q) for r in fc.r_grid)
    Hf = lambda s: height_H(u, cs, s, alpha, q)
    If = lambda s: energy_I(u, cs, s, alpha, q)
    Hp = np.array([_richardson(Hf, r, fc.fd_step) for r in fc.r_grid])
    Ip = np.array([_richardson(If, r, fc.fd_step) for r in fc.r_grid])
    H = np.array([m.H for m in moments])
    hmax = H.max() if len(H) else 0.0
    valid = (H > H_REL_THRESHOLD * hmax) & (H > 0)
    r = np.array(fc.r_grid)
    N = np.where(valid, np.array([m.I for m in moments]) / np.where(valid, H, 1.0), np.nan)
    return FrequencyProfile(alpha, r, moments, Hp, Ip, valid, N, 0.0, cs.d)


# --- inequality ledger --------------------------------------------------------

@dataclass
class LedgerEntry:
    """Samples of  lhs <= fixed + C * coeff  and the smallest admissible C.

    A sample whose excess lhs - fixed stays below tol * scale needs no C.  A
    sample with a positive excess and coeff <= 0 cannot be repaired by any C
    and is a violation.  ``C`` is infinite exactly when violations exist.
    """

    name: str
    r: np.ndarray
    param: np.ndarray
    lhs: np.ndarray
    fixed: np.ndarray
    coeff: np.ndarray
    tol: float
    C: float = 0.0
    violations: list = field(default_factory=list)
    note: str = ""

    def __post_init__(self):
        self.r, self.param = np.asarray(self.r, float), np.asarray(self.param, float)
        self.lhs, self.fixed = np.asarray(self.lhs, float), np.asarray(self.fixed, float)
        self.coeff = np.asarray(self.coeff, float)
        excess = self.lhs - self.fixed
        scale = np.abs(self.lhs) + np.abs(self.fixed) + np.abs(self.coeff)
        needs = excess > self.tol * scale
        self.violations = [int(i) for i in np.flatnonzero(needs & (self.coeff <= 0))]
        ok = needs & (self.coeff > 0)
        if self.violations:
            self.C = math.inf
        else:
            # smallest C accepted by holds_with, nudged up past rounding
            slack = excess[ok] - self.tol * scale[ok]
            C = float(np.max(slack / self.coeff[ok])) if np.any(ok) else 0.0
            while not self.holds_with(C):
                C = float(np.nextafter(C, math.inf))
            self.C = C

    @property
    def ok(self) -> bool:
        return not self.violations

    def holds_with(self, C: float) -> bool:
        excess = self.lhs - self.fixed - C * self.coeff
        scale = np.abs(self.lhs) + np.abs(self.fixed) + np.abs(self.coeff)
        return bool(np.all(excess <= self.tol * scale))


def merge_entries(name: str, entries: Sequence[LedgerEntry], note: str = "") -> LedgerEntry:
    """Pool samples of several sweeps so one constant must serve them all."""
    cat = lambda attr: np.concatenate([getattr(e, attr) for e in entries])
    tol = max(e.tol for e in entries)
    return LedgerEntry(name, cat("r"), cat("param"), cat("lhs"), cat("fixed"), cat("coeff"), tol, note=note)


@dataclass
class InequalityLedger:
    entries: dict = field(default_factory=dict)

    def add(self, entry: LedgerEntry) -> LedgerEntry:
        self.entries[entry.name] = entry
        return entry

    def extend(self, other: "InequalityLedger") -> "InequalityLedger":
        self.entries.update(other.entries)
        return self

    def __getitem__(self, name) -> LedgerEntry:
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries.values())

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["inequality", "r", "param", "lhs", "fixed", "coeff", "fitted_C", "violation"])
        for e in self.entries.values():
            bad = set(e.violations)
            for i in range(len(e.lhs)):
                writer.writerow([e.name, repr(float(e.r[i])), repr(float(e.param[i])), repr(float(e.lhs[i])),
                                 repr(float(e.fixed[i])), repr(float(e.coeff[i])), repr(float(e.C)),
                                 int(i in bad)])
        return buf.getvalue()

    def summary(self) -> str:
        lines = []
        for e in self.entries.values():
            status = "ok" if e.ok else f"{len(e.violations)} violation(s)"
            lines.append(f"{e.name}: C = {e.C!r} over {len(e.lhs)} samples, {status}")
        return "\n".join(lines)


def eps_tilde(cs: CoefficientSet, r) -> np.ndarray:
    """eps(r) + r."""
    r = np.asarray(r, dtype=float)
    return np.asarray(cs.eps_modulus(r), dtype=float) + r


# --- checks -------------------------------------------------------------------

def _valid(profile: FrequencyProfile):
    return np.flatnonzero(profile.valid)


def check_H_derivative(profile: FrequencyProfile, cs: CoefficientSet, tol: float = 1e-6) -> InequalityLedger:
    """H' against (2 alpha + d)/r H + I/((alpha+1) r).

    ``H_derivative`` fits |R| <= C eps(r)/r H; with eps = 0 the fit succeeds
    only if R vanishes to ``tol``.  ``H_derivative_exact`` also includes the
    coefficient correction (1/r) int u^2 [d(1-mu) + tr(A-I) + x_j d_i a_ij] w^alpha,
    which turns the relation into an identity for block-structured A.
    """
    idx = _valid(profile)
    a, d = profile.alpha, profile.d
    r = profile.r[idx]
    H, I = profile.H[idx], profile.I[idx]
    E = profile.column("E")[idx]
    Hp = profile.Hprime[idx]
    main = (2 * a + d) / r * H + I / ((a + 1) * r)
    R = Hp - main
    scale = np.abs(Hp) + np.abs(main)
    eps = np.asarray(cs.eps_modulus(r), dtype=float)
    ledger = InequalityLedger()
    ledger.add(LedgerEntry("H_derivative", r, np.full(len(r), a), np.abs(R), tol * scale, eps / r * H, tol))
    Rx = Hp - main - E / r
    ledger.add(LedgerEntry("H_derivative_exact", r, np.full(len(r), a), np.abs(Rx),
                           tol * (scale + np.abs(E / r)), np.zeros(len(r)), tol))
    return ledger


def h_derivative_residual(profile: FrequencyProfile) -> np.ndarray:
    """Relative residual |H' - (2 alpha + d)/r H - I/((alpha+1)r)| / |H'| per valid radius."""
    idx = _valid(profile)
    a, d = profile.alpha, profile.d
    r = profile.r[idx]
    main = (2 * a + d) / r * profile.H[idx] + profile.I[idx] / ((a + 1) * r)
    Hp = profile.Hprime[idx]
    return np.abs(Hp - main) / np.maximum(np.abs(Hp), np.finfo(float).tiny)


def _profile_for(u, cs, fc, profile):
    return profile if profile is not None else build_profile(u, cs, fc)


def check_aux_inequalities(u, cs: CoefficientSet, fc: FrequencyConfig,
                           profile: FrequencyProfile | None = None, tol: float = 1e-9) -> InequalityLedger:
    """The four weighted inequalities, each with one constant over the radius grid.

    (i)   alpha^2 int u^2 w^(alpha-1)|x|^2 <= C (alpha H + I1)
    (ii)  I2~ <= C M lambda^-1 r^2 H
    (iii) I3~ + int_Gamma u^2 |beta . D_T eta| w^(alpha+1) <= r I1/2 + alpha r H/2 + C M_eta^2 r H
    (iv)  I1 <= 2 I + C (M r^2 + alpha r + M_eta^2 r) H
    """
    prof = _profile_for(u, cs, fc, profile)
    a = prof.alpha
    r = prof.r
    col = prof.column
    H, I, I1 = col("H"), col("I"), col("I1")
    zeros = np.zeros(len(r))
    par = np.full(len(r), a)
    M, Me, lam = cs.M, cs.M_eta, cs.lam
    ledger = InequalityLedger()
    ledger.add(LedgerEntry("weighted_poincare", r, par, col("P"), zeros, a * H + I1, tol))
    ledger.add(LedgerEntry("majorant_V", r, par, col("I2t"), zeros, M / lam * r**2 * H, tol))
    ledger.add(LedgerEntry("majorant_eta", r, par, col("I3t") + col("B"), r * I1 / 2 + a * r * H / 2,
                           Me**2 * r * H, tol))
    ledger.add(LedgerEntry("I1_bound", r, par, I1, 2 * I, (M * r**2 + a * r + Me**2 * r) * H, tol))
    return ledger


def check_trace_inequality(u, cs: CoefficientSet, r_grid: Iterable[float], alpha: float,
                           delta_grid: Iterable[float], config: QuadratureConfig = DEFAULT_CONFIG,
                           tol: float = 1e-9, name: str = "trace") -> LedgerEntry:
    """int_Gamma u^2 w^(alpha+1) <= C (delta I1 + delta alpha H + r^2 H / delta) over r and delta."""
    rs, ds, lhs, coeff = [], [], [], []
    for r in r_grid:
        m = compute_moments(u, cs, r, alpha, config)
        for delta in delta_grid:
            if not delta > 0:
                raise ValueError("delta must be positive")
            rs.append(r)
            ds.append(delta)
            lhs.append(m.T)
            coeff.append(delta * m.I1 + delta * alpha * m.H + r * r * m.H / delta)
    return LedgerEntry(name, rs, ds, lhs, np.zeros(len(lhs)), coeff, tol)


def cauchy_schwarz_check(profile: FrequencyProfile, tol: float = 1e-10) -> LedgerEntry:
    """I^2 <= 4 (alpha+1)^2 [int <A Du, x>^2 mu^-1 w^alpha] H at each radius."""
    a = profile.alpha
    I, H, S = profile.column("I"), profile.column("H"), profile.column("S")
    return LedgerEntry("cauchy_schwarz", profile.r, np.full(len(I), a), I**2, 4 * (a + 1) ** 2 * S * H,
                       np.zeros(len(I)), tol)


class MonotonicityResult(NamedTuple):
    C: float
    Ntilde: np.ndarray
    monotone: bool
    entry: LedgerEntry
    frequency_bound: LedgerEntry
    profile: FrequencyProfile


def _phi(cs: CoefficientSet, s: float) -> float:
    """int_0^s eps~(t)/t dt = int_0^s eps(t)/t dt + s."""
    return dini_integral(cs.eps_modulus, 0.0, s) + s


def corrected_frequency(N: np.ndarray, r: np.ndarray, cs: CoefficientSet, alpha: float, C: float,
                        M: float | None = None, M_eta: float | None = None) -> np.ndarray:
    """N~(r) = N e^{C Phi(r)} + C int_0^r (eps~(s)/s)(M s + alpha + M_eta^2) e^{C Phi(s)} ds."""
    from scipy import integrate

    M = cs.M if M is None else M
    Me = cs.M_eta if M_eta is None else M_eta
    out = np.empty(len(r))
    for i, (n, ri) in enumerate(zip(N, r)):
        if C == 0:
            out[i] = n
            continue
        g = lambda s: float(eps_tilde(cs, s)) / s * (M * s + alpha + Me**2) * math.exp(C * _phi(cs, s))
        tail, _ = integrate.quad(g, 0.0, ri, limit=200, epsabs=1e-13, epsrel=1e-11)
        out[i] = n * math.exp(C * _phi(cs, ri)) + C * tail
    return out


def check_monotonicity(profile: FrequencyProfile, cs: CoefficientSet, fc: FrequencyConfig | None = None,
                       tol: float = 1e-6, N1: float | None = None) -> MonotonicityResult:
    """Fit N' >= -C eps~/r N - C eps~/r (M r + alpha + M_eta^2); build N~; test the N bound.

    ``N1`` is N(1); when omitted it is read from the profile's last radius,
    which must then be 1.
    """
    idx = _valid(profile)
    if not len(idx):
        raise DegenerateHeightError("no radius with nondegenerate H")
    a = profile.alpha
    r = profile.r[idx]
    N, Np = profile.N[idx], profile.Nprime[idx]
    et = eps_tilde(cs, r)
    coeff = et / r * (N + cs.M * r + a + cs.M_eta**2)
    entry = LedgerEntry("almost_monotonicity", r, np.full(len(r), a), -Np, np.zeros(len(r)), coeff, tol)
    C = entry.C if entry.ok else 0.0
    Nt_valid = corrected_frequency(N, r, cs, a, C)
    Nt = np.full(len(profile.r), np.nan)
    Nt[idx] = Nt_valid
    scale = np.maximum(np.abs(Nt_valid), 1.0)
    steps = np.diff(Nt_valid)
    monotone = bool(entry.ok and np.all(steps >= -tol * scale[1:]))

    if N1 is None:
        if not math.isclose(profile.r[-1], 1.0) or not profile.valid[-1]:
            raise ValueError("N(1) is needed: pass N1 or end the grid at r = 1")
        N1 = float(profile.N[-1])
    K = C * (cs.I_eps + 1)
    bound = max(N1, 0.0) * math.exp(K) + K * math.exp(K) * (cs.M + a + cs.M_eta**2)
    frequency_bound = LedgerEntry("frequency_bound", r, np.full(len(r), a), N, np.full(len(r), bound),
                            np.zeros(len(r)), tol)
    new_profile = replace(profile, Ntilde=Nt, ntilde_C=C)
    return MonotonicityResult(C, Nt, monotone, entry, frequency_bound, new_profile)


def check_second_variation(u, cs: CoefficientSet, fc: FrequencyConfig,
                           profile: FrequencyProfile | None = None, tol: float = 1e-6,
                           eta_free: bool = False) -> InequalityLedger:
    """I' >= (d+2 alpha)/r I - C eps~/r I - C eps~/r K H + 4(alpha+1)/r int <A Du,x>^2 mu^-1 w^alpha.

    K = M r + alpha + M_eta^2, or K = r^2 M with ``eta_free`` (constant
    negative eta).  ``second_variation_identity`` records the gap itself;
    it is zero when A = I, V = 0 and eta = 0.
    """
    prof = _profile_for(u, cs, fc, profile)
    idx = _valid(prof)
    a, d = prof.alpha, prof.d
    r = prof.r[idx]
    I, H, S = prof.I[idx], prof.H[idx], prof.column("S")[idx]
    Ip = prof.Iprime[idx]
    base = (d + 2 * a) / r * I + 4 * (a + 1) / r * S
    gap = Ip - base
    et = eps_tilde(cs, r)
    K = r * r * cs.M if eta_free else cs.M * r + a + cs.M_eta**2
    coeff = et / r * (I + K * H)
    name = "second_variation_eta_free" if eta_free else "second_variation"
    ledger = InequalityLedger()
    ledger.add(LedgerEntry(name, r, np.full(len(r), a), -gap, np.zeros(len(r)), coeff, tol))
    return ledger


def second_variation_gap(profile: FrequencyProfile) -> np.ndarray:
    """Relative gap |I' - (d+2 alpha)/r I - 4(alpha+1)/r S| / (|I'| + |...|) per valid radius.

    Zero up to differencing error when A = I, V = 0 and eta = 0.
    """
    idx = _valid(profile)
    a, d = profile.alpha, profile.d
    r = profile.r[idx]
    base = (d + 2 * a) / r * profile.I[idx] + 4 * (a + 1) / r * profile.column("S")[idx]
    Ip = profile.Iprime[idx]
    return np.abs(Ip - base) / np.maximum(np.abs(Ip) + np.abs(base), np.finfo(float).tiny)
