"""Quadrature on half-balls and their flat boundary pieces with degenerate weights.

Integrals of the form

    int_{B_r^+} f(x) (r^2 - |x|^2)^p dx        and        int_{Gamma_r} g(x') (r^2 - |x'|^2)^p dx'

are computed with product rules: Gauss-Jacobi in the radial variable (the
weight ``(1 - t^2)^p t^(d-1)`` is absorbed into the nodes, so the vanishing of
the weight at the rim costs no digits) times Gauss-Legendre in the polar angle.
All sums go through :func:`math.fsum`, which is exactly rounded, so results do
not depend on traversal order or thread count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import QuadratureError

DEFAULT_N_RAD = 64
DEFAULT_N_ANG = 128
NODE_CAP = 2048

Field = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class QuadratureConfig:
    """Node counts used for every half-ball and boundary integral."""

    n_rad: int = DEFAULT_N_RAD
    n_ang: int = DEFAULT_N_ANG
    n_bdry: int | None = None

    def __post_init__(self):
        if self.n_rad < 2 or self.n_ang < 2:
            raise ValueError("node counts must be at least 2")
        if self.n_bdry is not None and self.n_bdry < 2:
            raise ValueError("boundary node count must be at least 2")

    @property
    def boundary_nodes(self) -> int:
        return self.n_bdry if self.n_bdry is not None else 2 * self.n_rad

    def halved(self) -> "QuadratureConfig":
        return QuadratureConfig(max(2, self.n_rad // 2), max(2, self.n_ang // 2),
                                max(2, self.boundary_nodes // 2))

    def doubled(self) -> "QuadratureConfig":
        return QuadratureConfig(2 * self.n_rad, 2 * self.n_ang, 2 * self.boundary_nodes)


DEFAULT_CONFIG = QuadratureConfig()


@dataclass(frozen=True)
class QuadratureRule:
    """A rule on the unit half-ball (or unit flat piece) for the weight (1-|x|^2)^p.

    ``nodes`` has shape ``(n, d)`` and ``weights`` shape ``(n,)``; the weight
    function is already folded into ``weights``.  :meth:`scaled` maps the rule
    to radius ``r``.
    """

    d: int
    power: float
    n_rad: int
    n_ang: int
    nodes: np.ndarray
    weights: np.ndarray
    boundary: bool = False

    def scaled(self, r: float) -> tuple[np.ndarray, np.ndarray]:
        dim = self.d - 1 if self.boundary else self.d
        return r * self.nodes, self.weights * r ** (dim + 2.0 * self.power)

    def unit_mass(self) -> float:
        """Closed-form integral of the weight over the unit domain."""
        dim = self.d - 1 if self.boundary else self.d
        return _unit_weight_mass(dim, self.power, half=not self.boundary)


def _unit_weight_mass(dim: int, p: float, half: bool) -> float:
    # int_{B_1} (1-|x|^2)^p dx = pi^{dim/2} Gamma(p+1) / Gamma(p+1+dim/2)
    full = math.pi ** (dim / 2) * math.gamma(p + 1) / math.gamma(p + 1 + dim / 2)
    return full / 2 if half else full


def _radial_rule(n: int, p: float, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights on (0,1) for int_0^1 F(t) (1-t^2)^p t^(dim-1) dt."""
    xi, om = roots_jacobi(n, p, dim - 1)
    t = 0.5 * (1.0 + xi)
    w = om * 2.0 ** (-p - dim) * (1.0 + t) ** p
    return t, w


@lru_cache(maxsize=256)
def halfball_rule(d: int, power: float, n_rad: int = DEFAULT_N_RAD,
                  n_ang: int = DEFAULT_N_ANG) -> QuadratureRule:
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if power <= -1:
        raise ValueError("weight power must exceed -1")
    t, wt = _radial_rule(n_rad, power, d)
    if d == 2:
        gx, gw = roots_legendre(n_ang)
        theta = 0.5 * math.pi * (gx + 1.0)
        wth = 0.5 * math.pi * gw
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        dir_w = wth
    elif d == 3:
        # polar cosine in (0,1) by Gauss-Legendre, azimuth by the periodic trapezoid rule
        n_pol = max(2, n_ang // 2)
        gx, gw = roots_legendre(n_pol)
        c = 0.5 * (gx + 1.0)
        cw = 0.5 * gw
        phi = 2 * math.pi * np.arange(n_ang) / n_ang
        sc = np.sqrt(1.0 - c**2)
        dirs = np.stack([
            np.outer(sc, np.cos(phi)).ravel(),
            np.outer(sc, np.sin(phi)).ravel(),
            np.repeat(c, n_ang),
        ], axis=1)
        dir_w = np.repeat(cw, n_ang) * (2 * math.pi / n_ang)
    else:
        raise NotImplementedError("half-ball rules are provided for d = 2 and d = 3")
    nodes = (t[:, None, None] * dirs[None, :, :]).reshape(-1, d)
    weights = (wt[:, None] * dir_w[None, :]).ravel()
    return QuadratureRule(d, float(power), n_rad, n_ang, nodes, weights)


@lru_cache(maxsize=256)
def boundary_rule(d: int, power: float, n: int = 2 * DEFAULT_N_RAD,
                  n_ang: int = DEFAULT_N_ANG) -> QuadratureRule:
    """Rule on the flat piece Gamma_1 = {|x'| < 1, x_d = 0} embedded in R^d."""
    if power <= -1:
        raise ValueError("weight power must exceed -1")
    if d == 2:
        xi, om = roots_jacobi(n, power, power)
        nodes = np.stack([xi, np.zeros_like(xi)], axis=1)
        return QuadratureRule(d, float(power), n, 1, nodes, om, boundary=True)
    if d == 3:
        t, wt = _radial_rule(n, power, 2)
        phi = 2 * math.pi * np.arange(n_ang) / n_ang
        pts = np.stack([
            np.outer(t, np.cos(phi)).ravel(),
            np.outer(t, np.sin(phi)).ravel(),
            np.zeros(n * n_ang),
        ], axis=1)
        w = np.repeat(wt, n_ang) * (2 * math.pi / n_ang)
        return QuadratureRule(d, float(power), n, n_ang, pts, w, boundary=True)
    raise NotImplementedError("boundary rules are provided for d = 2 and d = 3")


def accumulate(weights: np.ndarray, values: np.ndarray) -> float:
    """Exactly rounded sum of weights * values; raises on non-finite samples."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise QuadratureError("non-finite integrand sample")
    return math.fsum((weights * values).tolist())


class IntegralResult(NamedTuple):
    value: float
    error: float


def _with_error(evaluate: Callable[[QuadratureConfig], tuple[float, float]],
                cfg: QuadratureConfig, tol: float | None) -> IntegralResult:
    """Pair a value with the change from the next-coarser rule; refine if ``tol`` asks."""
    while True:
        value, abs_sum = evaluate(cfg)
        coarse, _ = evaluate(cfg.halved())
        floor = 16 * np.finfo(float).eps * abs_sum
        err = max(abs(value - coarse), floor)
        if tol is None or err <= tol * max(abs(value), abs_sum, np.finfo(float).tiny):
            return IntegralResult(value, err)
        if cfg.n_rad * 2 > NODE_CAP:
            raise QuadratureError(
                f"no convergence to rel. tol {tol:g} below {NODE_CAP} radial nodes (err {err:.3e})")
        cfg = cfg.doubled()


def weighted_halfball_integral(f: Field, r: float, p: float, *, d: int = 2,
                               config: QuadratureConfig = DEFAULT_CONFIG,
                               with_error: bool = False, tol: float | None = None):
    """Integral of ``f(x) (r^2-|x|^2)^p`` over the half-ball B_r^+.

    ``f`` maps an ``(n, d)`` array of points to ``(n,)`` values.  With
    ``with_error`` (or a relative ``tol``) an :class:`IntegralResult` is
    returned whose error is the difference to the rule with half the nodes.
    """
    if not r > 0:
        raise ValueError("radius must be positive")

    def evaluate(c: QuadratureConfig) -> tuple[float, float]:
        rule = halfball_rule(d, float(p), c.n_rad, c.n_ang)
        x, w = rule.scaled(r)
        vals = np.asarray(f(x), dtype=float)
        return accumulate(w, vals), accumulate(w, np.abs(vals))

    if with_error or tol is not None:
        return _with_error(evaluate, config, tol)
    return evaluate(config)[0]


def weighted_boundary_integral(g: Field, r: float, p: float, *, d: int = 2,
                               config: QuadratureConfig = DEFAULT_CONFIG,
                               with_error: bool = False, tol: float | None = None):
    """Integral of ``g(x) (r^2-|x|^2)^p`` over Gamma_r = B_r cap {x_d = 0}.

    ``g`` receives points in R^d with last coordinate zero.
    """
    if not r > 0:
        raise ValueError("radius must be positive")
    if p < 0:
        raise ValueError("boundary weight power must be nonnegative")

    def evaluate(c: QuadratureConfig) -> tuple[float, float]:
        rule = boundary_rule(d, float(p), c.boundary_nodes, c.n_ang)
        x, w = rule.scaled(r)
        vals = np.asarray(g(x), dtype=float)
        return accumulate(w, vals), accumulate(w, np.abs(vals))

    if with_error or tol is not None:
        return _with_error(evaluate, config, tol)
    return evaluate(config)[0]


def piecewise_boundary_integral(g: Field, r: float, breakpoints: Sequence[float] = (),
                                p: float = 0.0, n: int = 32) -> float:
    """d = 2 boundary integral split at ``breakpoints`` inside (-r, r).

    Used for integrands that are only piecewise smooth along Gamma_r, such as
    functions supported on a union of intervals.
    """
    cuts = sorted({-r, r, *(b for b in breakpoints if -r < b < r)})
    gx, gw = roots_legendre(n)
    xs, ws = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        xs.append(0.5 * (b - a) * gx + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * gw)
    t = np.concatenate(xs)
    w = np.concatenate(ws) * (r * r - t * t) ** p
    pts = np.stack([t, np.zeros_like(t)], axis=1)
    return accumulate(w, g(pts))
