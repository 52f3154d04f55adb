"""Doubling, vanishing order and boundary estimates built on the frequency function.

    h~(rho) = int_{B_rho^+} u^2,   ratio(rho) = h~(kappa rho) / h~(rho).

The doubling exponent is the smallest E with ratio <= kappa^E on the grid.
The predicted form of the exponent is C * Lambda with

    Lambda = sqrt(N(1)_+) + sqrt(M) + M_eta + 1,

where N(1) is the frequency at r = 1 computed with alpha = 1.  The same
Lambda is used as the weight exponent alpha* when the sandwich inequalities
between H and h~ are checked.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .coefficients import CoefficientSet
from .errors import DegenerateHeightError, NotApplicableError
from .frequency import (FrequencyConfig, InequalityLedger, LedgerEntry, build_profile, eps_tilde,
                        frequency_N, height_H)
from .quadrature import (DEFAULT_CONFIG, QuadratureConfig, piecewise_boundary_integral,
                         weighted_boundary_integral, weighted_halfball_integral)

MASS_FLOOR = 1e-300


def halfball_mass(u, r: float, d: int = 2, config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """h~(r) = int_{B_r^+} u^2."""
    return weighted_halfball_integral(lambda x: np.asarray(u.value(x)) ** 2, r, 0.0, d=d, config=config)


def boundary_mass(u, r: float, d: int = 2, config: QuadratureConfig = DEFAULT_CONFIG) -> float:
    """int_{Gamma_r} u^2."""
    return weighted_boundary_integral(lambda x: np.asarray(u.value(x)) ** 2, r, 0.0, d=d, config=config)


def optimal_alpha(u, cs: CoefficientSet, config: QuadratureConfig = DEFAULT_CONFIG) -> tuple[float, float]:
    """(alpha*, N(1)) with alpha* = sqrt(N(1)_+) + sqrt(M) + M_eta + 1 and N(1) taken at alpha = 1."""
    N1 = frequency_N(u, cs, 1.0, 1.0, config)
    return math.sqrt(max(N1, 0.0)) + math.sqrt(cs.M) + cs.M_eta + 1.0, N1


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


@dataclass
class DoublingReport:
    rho: np.ndarray
    kappa: float
    h_rho: np.ndarray
    h_kappa_rho: np.ndarray
    alpha_star: float
    N1: float
    Lam: float
    exponent: float
    prefactor_C: float
    sandwich: InequalityLedger = field(default_factory=InequalityLedger)

    @property
    def ratios(self) -> np.ndarray:
        return self.h_kappa_rho / self.h_rho

    @property
    def local_exponents(self) -> np.ndarray:
        return np.log(self.ratios) / math.log(self.kappa)

    def bound_holds(self, C: float | None = None) -> bool:
        """ratio <= kappa^{C Lambda} e^{C Lambda} at every grid point."""
        C = self.prefactor_C if C is None else C
        lhs = np.log(self.ratios)
        rhs = C * self.Lam * (math.log(self.kappa) + 1)
        return bool(np.all(lhs <= rhs * (1 + 1e-12) + 1e-12))

    def to_csv(self) -> str:
        rows = zip(self.rho, self.kappa * self.rho, self.h_rho, self.h_kappa_rho, self.ratios,
                   self.local_exponents)
        return _csv(["rho", "kappa_rho", "h_rho", "h_kappa_rho", "ratio", "exponent"], rows)

    def summary(self) -> str:
        return (f"doubling: kappa={self.kappa!r} alpha*={self.alpha_star!r} N(1)={self.N1!r} "
                f"Lambda={self.Lam!r} exponent E={self.exponent!r} C={self.prefactor_C!r}")


def doubling_report(u, cs: CoefficientSet, rho_grid: Sequence[float], kappa: float,
                    config: QuadratureConfig = DEFAULT_CONFIG, alpha: float | None = None,
                    sandwich_tol: float = 1e-10) -> DoublingReport:
    """Doubling ratios on the grid, the fitted exponent and the sandwich checks.

    With mu between lambda and 1/lambda the sandwich inequalities read
    H(rho) <= lambda^-1 rho^{2 alpha} h~(rho) and
    lambda (tau^2 - rho^2)^alpha h~(rho) <= H(tau) for rho < tau;
    for A = I (lambda = 1) these are the plain forms.
    """
    if not kappa > 2:
        raise ValueError("kappa must exceed 2")
    rho = np.asarray(sorted(float(r) for r in rho_grid))
    if not len(rho):
        raise ValueError("rho grid is empty")
    if np.any(rho <= 0):
        raise ValueError("radii must be positive")
    if kappa * rho[-1] > cs.domain.r_max * (1 + 1e-12):
        raise ValueError(f"kappa * rho = {kappa * rho[-1]} leaves the domain of radius {cs.domain.r_max}")
    d = cs.d
    lam_star, N1 = optimal_alpha(u, cs, config)
    a = lam_star if alpha is None else float(alpha)
    h = np.array([halfball_mass(u, r, d, config) for r in rho])
    hk = np.array([halfball_mass(u, kappa * r, d, config) for r in rho])
    if np.any(h <= MASS_FLOOR):
        bad = rho[np.argmax(h <= MASS_FLOOR)]
        raise DegenerateHeightError(f"h~({bad}) is below {MASS_FLOOR:g}")
    logs = np.log(hk / h)
    E = float(logs.max() / math.log(kappa))
    C = float(max(logs.max(), 0.0) / (lam_star * (math.log(kappa) + 1)))

    ledger = InequalityLedger()
    H = np.array([height_H(u, cs, r, a, config) for r in rho])
    lam = cs.lam
    ledger.add(LedgerEntry("sandwich_upper", rho, np.full(len(rho), a), H, rho ** (2 * a) * h / lam,
                           np.zeros(len(rho)), sandwich_tol))
    pr, pt, lhs, rhs = [], [], [], []
    for i in range(len(rho)):
        for j in range(i + 1, len(rho)):
            pr.append(rho[i])
            pt.append(rho[j])
            lhs.append(lam * (rho[j] ** 2 - rho[i] ** 2) ** a * h[i])
            rhs.append(H[j])
    if pr:
        ledger.add(LedgerEntry("sandwich_lower", pr, pt, lhs, rhs, np.zeros(len(pr)), sandwich_tol))
    return DoublingReport(rho, float(kappa), h, hk, a, N1, lam_star, E, C, ledger)


# --- vanishing order ------------------------------------------------------------

@dataclass
class VanishingOrderReport:
    r: np.ndarray
    log_mass: np.ndarray
    slope: float
    intercept: float
    order: float
    fit_residual: float
    nonlinear: bool
    Lam: float
    normalisation: float

    def to_csv(self) -> str:
        return _csv(["r", "log_mass"], zip(self.r, self.log_mass))

    def summary(self) -> str:
        flag = " (fit nonlinear)" if self.nonlinear else ""
        return (f"vanishing order: slope={self.slope!r} order={self.order!r} "
                f"residual={self.fit_residual!r} Lambda={self.Lam!r}{flag}")


def vanishing_order_estimate(u, cs: CoefficientSet, r_grid: Sequence[float],
                             config: QuadratureConfig = DEFAULT_CONFIG,
                             nonlinear_tol: float = 0.05) -> VanishingOrderReport:
    """Least-squares slope s of log int_{B_r^+} u^2 against log r; order = (s - d)/2.

    u is first scaled to unit L^2 mass on B_1^+ (on B_{r_max}^+ when the
    domain is smaller).  The grid must span at least two decades.
    """
    r = np.asarray(sorted(float(v) for v in r_grid))
    if len(r) < 2 or r[-1] / r[0] < 100 * (1 - 1e-12):
        raise ValueError("radius grid must span at least two decades")
    d = cs.d
    R1 = min(1.0, cs.domain.r_max)
    norm = halfball_mass(u, R1, d, config)
    if not norm > 0:
        raise DegenerateHeightError("u has zero mass on the unit half-ball")
    m = np.array([halfball_mass(u, s, d, config) for s in r]) / norm
    if np.any(m <= MASS_FLOOR):
        raise DegenerateHeightError(f"mass underflows at r = {r[np.argmax(m <= MASS_FLOOR)]}")
    lr, lm = np.log(r), np.log(m)
    X = np.column_stack([lr, np.ones_like(lr)])
    (slope, icpt), *_ = np.linalg.lstsq(X, lm, rcond=None)
    resid = lm - X @ np.array([slope, icpt])
    rms = float(np.sqrt(np.mean(resid**2)))
    order = max(0.0, (slope - d) / 2)
    try:
        Lam = math.sqrt(max(frequency_N(u, cs, 1.0, 1.0, config), 0.0)) + math.sqrt(cs.M) + cs.M_eta + 1
    except (DegenerateHeightError, ValueError):
        Lam = math.nan
    return VanishingOrderReport(r, lm, float(slope), float(icpt), float(order), rms,
                                rms > nonlinear_tol, Lam, norm)


# --- constant negative eta ------------------------------------------------------

def constant_eta_value(cs: CoefficientSet, n: int = 65, tol: float = 1e-12) -> float:
    """The value of eta when it is constant and nonpositive on Gamma; raises otherwise."""
    xb = cs.domain.sample_boundary(n)
    eta = np.asarray(cs.eta(xb), dtype=float)
    if np.ptp(eta) > tol * max(1.0, np.abs(eta).max()):
        raise NotApplicableError("eta is not constant on the flat boundary")
    if eta[0] > 0:
        raise NotApplicableError("eta must be a nonpositive constant")
    return float(eta[0])


@dataclass
class ConstantEtaReport:
    eta0: np.ndarray
    C_monotonicity: np.ndarray
    C_second_variation: np.ndarray
    majorant_gap: np.ndarray
    ledger: InequalityLedger

    @staticmethod
    def _spread(C) -> float:
        C = np.asarray(C)
        if np.all(C == 0):
            return 1.0
        if np.any(C == 0) or np.any(~np.isfinite(C)):
            return math.inf
        return float(C.max() / C.min())

    @property
    def spread(self) -> float:
        """max C / min C over the sweep (1 when every fitted constant is zero)."""
        return self._spread(self.C_monotonicity)

    @property
    def stable(self) -> bool:
        return self.spread < 2.0

    def summary(self) -> str:
        pairs = ", ".join(f"eta0={float(e)!r}: C={float(c)!r}" for e, c in zip(self.eta0, self.C_monotonicity))
        return f"M_eta-free monotonicity: {pairs}; spread={self.spread!r}"


def constant_eta_frequency_check(solutions: Iterable, fc: FrequencyConfig, tol: float = 1e-6,
                                 majorant_tol: float = 1e-12) -> ConstantEtaReport:
    """Fit N' >= -C eps~/r N - C eps~ r M for each solution with eta = -eta0 constant.

    Also checks that I3~ = I3 (the boundary integrand has one sign) and fits
    the matching second-variation inequality whose error term is eps~/r r^2 M H.
    """
    from .frequency import check_second_variation

    eta0s, Cp, Cl, gaps = [], [], [], []
    ledger = InequalityLedger()
    for u in solutions:
        cs = u.coefficients
        eta0 = float(-constant_eta_value(cs))
        prof = build_profile(u, cs, fc)
        idx = np.flatnonzero(prof.valid)
        r = prof.r[idx]
        I3, I3t = prof.column("I3")[idx], prof.column("I3t")[idx]
        gaps.append(float(np.max(np.abs(I3t - I3) / np.maximum(np.abs(I3t), np.finfo(float).tiny))))
        et = eps_tilde(cs, r)
        entry = LedgerEntry(f"eta_free_monotonicity[eta0={eta0!r}]", r, np.full(len(r), eta0),
                            -prof.Nprime[idx], np.zeros(len(r)), et / r * prof.N[idx] + et * r * cs.M, tol)
        lem = check_second_variation(u, cs, fc, prof, tol=tol, eta_free=True)["second_variation_eta_free"]
        lem.name = f"second_variation_eta_free[eta0={eta0!r}]"
        ledger.add(entry)
        ledger.add(lem)
        ledger.add(LedgerEntry(f"majorant_equality[eta0={eta0!r}]", r, np.full(len(r), eta0),
                               np.abs(I3t - I3), majorant_tol * np.abs(I3t), np.zeros(len(r)), 0.0))
        eta0s.append(eta0)
        Cp.append(entry.C)
        Cl.append(lem.C)
    return ConstantEtaReport(np.array(eta0s), np.array(Cp), np.array(Cl), np.array(gaps), ledger)


# --- stability and boundary estimates ------------------------------------------

@dataclass
class StabilityResult:
    r: float
    delta: float
    lhs: float
    boundary: float
    interior: float
    C: float
    flagged: bool


def boundary_stability_check(u, cs: CoefficientSet, r: float, delta: float,
                             config: QuadratureConfig = DEFAULT_CONFIG,
                             boundary_floor: float = 1e-14) -> StabilityResult:
    """Smallest C >= 0 with int_{B_r^+} u^2 <= C r int_{Gamma_2r} u^2 + delta int_{B_2r^+} u^2.

    When the boundary term is negligible but the left side still exceeds the
    interior term no finite C exists; the case is flagged with C = inf.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if 2 * r > cs.domain.r_max * (1 + 1e-12):
        raise ValueError("2r leaves the domain")
    d = cs.d
    lhs = halfball_mass(u, r, d, config)
    inner = halfball_mass(u, 2 * r, d, config)
    bnd = boundary_mass(u, 2 * r, d, config)
    excess = lhs - delta * inner
    if excess <= 0:
        return StabilityResult(r, delta, lhs, bnd, inner, 0.0, False)
    if bnd <= boundary_floor * max(inner, np.finfo(float).tiny):
        return StabilityResult(r, delta, lhs, bnd, inner, math.inf, True)
    return StabilityResult(r, delta, lhs, bnd, inner, excess / (r * bnd), False)


def boundary_stability_entry(solutions: Iterable, r_grid: Sequence[float], delta_grid: Sequence[float],
                             config: QuadratureConfig = DEFAULT_CONFIG, tol: float = 1e-12,
                             name: str = "boundary_stability") -> LedgerEntry:
    """One constant C for  int_{B_r^+} u^2 <= C r int_{Gamma_2r} u^2 + delta int_{B_2r^+} u^2
    over every solution, radius and delta; ``param`` records delta."""
    rs, ds, lhs, fixed, coeff = [], [], [], [], []
    for u in solutions:
        d = u.coefficients.d
        for r in r_grid:
            if 2 * r > u.coefficients.domain.r_max * (1 + 1e-12):
                raise ValueError("2r leaves the domain")
            inner = halfball_mass(u, r, d, config)
            outer = halfball_mass(u, 2 * r, d, config)
            bnd = boundary_mass(u, 2 * r, d, config)
            for delta in delta_grid:
                if not 0 < delta < 1:
                    raise ValueError("delta must lie in (0, 1)")
                rs.append(r)
                ds.append(delta)
                lhs.append(inner)
                fixed.append(delta * outer)
                coeff.append(r * bnd)
    return LedgerEntry(name, rs, ds, lhs, fixed, coeff, tol)


def boundary_doubling_ratios(u, r_grid: Sequence[float], config: QuadratureConfig = DEFAULT_CONFIG) -> np.ndarray:
    """int_{Gamma_2r} u^2 / int_{Gamma_r} u^2 on the grid."""
    d = u.coefficients.d
    b = np.array([boundary_mass(u, r, d, config) for r in r_grid])
    if np.any(b <= MASS_FLOOR):
        raise DegenerateHeightError("boundary integral vanishes on the grid")
    return np.array([boundary_mass(u, 2 * r, d, config) for r in r_grid]) / b


@dataclass(frozen=True)
class BoundaryMask:
    """A subset Sigma of Gamma_R (d = 2) given by the intervals of its complement."""

    complement: tuple
    R: float = 1.0

    def __post_init__(self):
        ivs = sorted((float(a), float(b)) for a, b in self.complement)
        for a, b in ivs:
            if not -self.R <= a < b <= self.R:
                raise ValueError(f"interval ({a}, {b}) is not inside (-R, R)")
        for (a0, b0), (a1, _) in zip(ivs, ivs[1:]):
            if a1 < b0:
                raise ValueError("complement intervals overlap")
        object.__setattr__(self, "complement", tuple(ivs))

    def density(self, r: float) -> float:
        """|Gamma_r cap Sigma^c| / |Gamma_r|, computed exactly."""
        if not r > 0:
            raise ValueError("radius must be positive")
        covered = sum(max(0.0, min(b, r) - max(a, -r)) for a, b in self.complement)
        return covered / (2 * r)

    def breakpoints(self):
        return [v for iv in self.complement for v in iv]

    def in_sigma(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.abs(t) <= self.R
        for a, b in self.complement:
            out &= ~((t > a) & (t < b))
        return out


@dataclass
class BoundaryVanishingReport:
    r: np.ndarray
    boundary_mass: np.ndarray
    doubling_ratios: np.ndarray
    doubling_exponent: float
    applicable: bool = True
    density: np.ndarray | None = None
    mean_half: np.ndarray | None = None
    mean_double: np.ndarray | None = None
    density_entry: LedgerEntry | None = None
    message: str = ""

    def to_csv(self) -> str:
        n = len(self.r)
        cols = [self.r, self.boundary_mass]
        header = ["r", "boundary_mass"]
        ratios = np.full(n, np.nan)
        ratios[: len(self.doubling_ratios)] = self.doubling_ratios
        cols.append(ratios)
        header.append("doubling_ratio")
        if self.density is not None:
            cols += [self.density, self.mean_half, self.mean_double]
            header += ["density", "mean_half", "mean_double"]
        return _csv(header, zip(*cols))


def boundary_vanishing_check(u, cs: CoefficientSet, r_grid: Sequence[float],
                             mask: BoundaryMask | None = None, config: QuadratureConfig = DEFAULT_CONFIG,
                             vanish_tol: float = 1e-12, n_piece: int = 32) -> BoundaryVanishingReport:
    """Boundary doubling int_{Gamma_2r} u^2 / int_{Gamma_r} u^2 and, with a mask, the density-point decay

        (mean_{Gamma_{r/2}} u^2)^{1/2} <= C (mean_{Gamma_{2r}} u^2)^{1/2} dens(r/2)^{1/2}

    where dens(s) = |Gamma_s cap Sigma^c| / |Gamma_s|.  The decay check needs u
    to vanish on Sigma; otherwise the report says it is not applicable.
    """
    r = np.asarray(sorted(float(v) for v in r_grid))
    if not len(r) or np.any(r <= 0):
        raise ValueError("radius grid must be nonempty and positive")
    if 2 * r[-1] > cs.domain.r_max * (1 + 1e-12):
        raise ValueError("2r leaves the domain")
    d = cs.d
    u2 = lambda x: np.asarray(u.value(x)) ** 2
    if mask is None:
        b = np.array([boundary_mass(u, s, d, config) for s in r])
        b2 = np.array([boundary_mass(u, 2 * s, d, config) for s in r])
    else:
        bp = mask.breakpoints()
        b = np.array([piecewise_boundary_integral(u2, s, bp, n=n_piece) for s in r])
        b2 = np.array([piecewise_boundary_integral(u2, 2 * s, bp, n=n_piece) for s in r])
    if np.any(b <= MASS_FLOOR) and mask is None:
        raise DegenerateHeightError("boundary integral vanishes on the grid")
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(b > 0, b2 / b, np.inf)
    finite = ratios[np.isfinite(ratios)]
    expo = float(np.log2(finite).max()) if len(finite) else math.nan
    report = BoundaryVanishingReport(r, b, ratios, expo)
    if mask is None:
        return report

    # precondition: u = 0 on Sigma
    t = np.linspace(-min(mask.R, 2 * r[-1]), min(mask.R, 2 * r[-1]), 4001)
    pts = np.column_stack([t, np.zeros_like(t)])
    vals = np.abs(np.asarray(u.value(pts)))
    on_sigma = mask.in_sigma(t)
    scale = max(vals.max(), np.finfo(float).tiny)
    if (not np.any(on_sigma)) or vals[on_sigma].max() > vanish_tol * scale:
        report.applicable = False
        report.message = "not applicable: u does not vanish on Sigma"
        return report

    half = np.array([piecewise_boundary_integral(u2, s / 2, mask.breakpoints(), n=n_piece) / s for s in r])
    dbl = np.array([piecewise_boundary_integral(u2, 2 * s, mask.breakpoints(), n=n_piece) / (4 * s) for s in r])
    dens = np.array([mask.density(s / 2) for s in r])
    entry = LedgerEntry("density_decay", r, dens, np.sqrt(half), np.zeros(len(r)), np.sqrt(dbl * dens), 1e-12)
    report.density, report.mean_half, report.mean_double = dens, half, dbl
    report.density_entry = entry
    return report
