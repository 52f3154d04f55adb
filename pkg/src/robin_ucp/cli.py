"""Config-driven experiment runner.

A config (YAML or JSON, or the name of a built-in config) selects a solution,
optionally a matrix field for which V and eta are manufactured, optionally a
curved boundary chart that is flattened first, and the radius grids.  A run
writes, per experiment directory:

    profile.csv      frequency quantities per radius
    ledger.csv       every inequality sample with its fitted constant
    doubling.csv     doubling ratios and local exponents
    vanishing.csv    log-mass table of the vanishing-order fit
    boundary.csv     boundary masses and boundary doubling ratios
    fem.csv          finite-element errors (only with a fem block)
    summary.txt      one line per check
    config.json      the validated config
    plot.gp          gnuplot script for the profile and doubling curves

Exit codes: 0 success, 1 invalid config, 2 numerical failure, 3 inequality
violation.  All floats are written with repr, so identical configs give
bit-identical files.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .coefficients import BUILTIN_FIELDS, CoefficientSet, HalfBallDomain, check_dini_bound
from .doubling_ucp import (boundary_doubling_ratios, boundary_stability_entry,
                           constant_eta_value, doubling_report, optimal_alpha, vanishing_order_estimate)
from .errors import NotApplicableError, WorkbenchError
from .flatten import (CHARTS, FlatteningMap, chart_domain, curved_robin_data, pushforward_problem,
                      transform_solution)
from .frequency import (FrequencyConfig, InequalityLedger, build_profile, cauchy_schwarz_check,
                        check_aux_inequalities, check_H_derivative, check_monotonicity, check_second_variation,
                        check_trace_inequality, frequency_N)
from .quadrature import QuadratureConfig
from .solutions import ANALYTIC_SOLUTIONS, Solution, analytic_solution
from .solutions.analytic import manufactured

log = logging.getLogger("robin_ucp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VIOLATION = 0, 1, 2, 3

CHECKS = {
    "H_derivative": "H' against the closed formula",
    "aux_inequalities": "weighted Poincare, majorants of V and eta, I1 bound",
    "trace": "weighted trace inequality over a delta sweep",
    "cauchy_schwarz": "I^2 <= 4(alpha+1)^2 S H",
    "monotonicity": "almost monotonicity of N, corrected frequency, bound on N",
    "second_variation": "lower bound on I' (and its eta-free form for constant eta <= 0)",
    "doubling": "doubling ratios, fitted exponent, sandwich inequalities",
    "vanishing_order": "log-log slope of the half-ball mass",
    "boundary": "boundary stability with one constant, boundary doubling ratios",
}


# --- schema ---------------------------------------------------------------------

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NamedSpec(_Strict):
    name: str
    params: dict[str, float] = Field(default_factory=dict)


class ChartSpec(_Strict):
    name: str
    params: dict[str, float] = Field(default_factory=dict)
    chart_radius: float = 0.5

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        if v not in CHARTS:
            raise ValueError(f"unknown chart {v!r}; known: {sorted(CHARTS)}")
        return v


class RangeSpec(_Strict):
    start: float
    stop: float
    num: int
    spacing: Literal["linear", "log"] = "linear"

    @model_validator(mode="after")
    def _check(self):
        if self.num < 1:
            raise ValueError("num must be at least 1")
        if not 0 < self.start <= self.stop:
            raise ValueError("need 0 < start <= stop")
        return self

    def values(self) -> list[float]:
        if self.spacing == "log":
            v = np.geomspace(self.start, self.stop, self.num)
        else:
            v = np.linspace(self.start, self.stop, self.num)
        return [float(x) for x in np.round(v, 14)]


Grid = Union[list[float], RangeSpec]


def _grid(g: Grid) -> list[float]:
    return g.values() if isinstance(g, RangeSpec) else [float(x) for x in g]


class QuadratureSpec(_Strict):
    n_rad: int = 64
    n_ang: int = 128


class FemSpec(_Strict):
    h: float
    R: float = 1.0
    levels: int = 3


class ExperimentConfig(_Strict):
    """Validated experiment description; unknown keys are rejected."""

    name: str = "experiment"
    solution: NamedSpec
    coefficients: NamedSpec | None = None
    u_min: float | None = None
    chart: ChartSpec | None = None
    alpha: Union[float, Literal["auto"]] = 1.0
    r_grid: Grid = Field(default_factory=lambda: RangeSpec(start=0.1, stop=1.0, num=10))
    kappa: float = 3.0
    rho_grid: Grid = Field(default_factory=lambda: RangeSpec(start=0.01, stop=1 / 6, num=8, spacing="log"))
    vanishing_grid: Grid = Field(default_factory=lambda: RangeSpec(start=0.01, stop=1.0, num=9, spacing="log"))
    delta_grid: list[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0])
    stability_delta: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.25, 0.5])
    boundary_grid: Grid = Field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4])
    quadrature: QuadratureSpec = Field(default_factory=QuadratureSpec)
    fem: FemSpec | None = None
    residual_tol: float = 1e-6
    checks: list[str] = Field(default_factory=lambda: list(CHECKS))
    seed: int = 0  # seeds the sampled Dini-modulus check

    @field_validator("solution")
    @classmethod
    def _known_solution(cls, v):
        if v.name not in ANALYTIC_SOLUTIONS:
            raise ValueError(f"unknown solution {v.name!r}; known: {sorted(ANALYTIC_SOLUTIONS)}")
        return v

    @field_validator("coefficients")
    @classmethod
    def _known_coefficients(cls, v):
        if v is not None and v.name not in BUILTIN_FIELDS:
            raise ValueError(f"unknown coefficient set {v.name!r}; known: {sorted(BUILTIN_FIELDS)}")
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if v != "auto" and v < 1:
            raise ValueError("alpha must be at least 1")
        return v

    @field_validator("r_grid", "rho_grid", "vanishing_grid", "boundary_grid")
    @classmethod
    def _nonempty(cls, v):
        vals = _grid(v)
        if not vals:
            raise ValueError("grid is empty")
        if any(not x > 0 for x in vals):
            raise ValueError("grid values must be positive")
        return v

    @field_validator("checks")
    @classmethod
    def _known_checks(cls, v):
        bad = [c for c in v if c not in CHECKS]
        if bad:
            raise ValueError(f"unknown check(s) {bad}; known: {sorted(CHECKS)}")
        return v

    @field_validator("kappa")
    @classmethod
    def _kappa(cls, v):
        if not v > 2:
            raise ValueError("kappa must exceed 2")
        return v


BUILTIN_CONFIGS: dict[str, dict] = {
    "homogeneous-k2": {"name": "homogeneous-k2", "solution": {"name": "homogeneous", "params": {"k": 2}}},
    "robin-cosexp": {"name": "robin-cosexp", "solution": {"name": "robin-cosexp", "params": {"k": 1}}},
    "robin-exponential": {"name": "robin-exponential",
                          "solution": {"name": "robin-exponential", "params": {"eta0": 1}}},
    "block-exponential": {"name": "block-exponential",
                          "solution": {"name": "robin-exponential", "params": {"eta0": 1}},
                          "coefficients": {"name": "block", "params": {"c": 0.1}}},
}


def load_config(source: str) -> ExperimentConfig:
    """Config from a built-in name or a YAML/JSON file."""
    if source in BUILTIN_CONFIGS:
        return ExperimentConfig.model_validate(BUILTIN_CONFIGS[source])
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"no config file or built-in config named {source!r}")
    data = yaml.safe_load(path.read_text())
    if not isinstance(data, dict):
        raise ValueError("config must be a mapping")
    return ExperimentConfig.model_validate(data)


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "\n".join(lines)


# --- problem assembly ---------------------------------------------------------------

def dilated(u: Solution, s: float) -> Solution:
    """u(s y) with A(s y), s^2 V(s y), s eta(s y) on the half-ball of radius r_max / s."""
    cs = u.coefficients
    sc = lambda y: s * np.asarray(y, dtype=float)
    cs_s = CoefficientSet(
        A=lambda y: cs.A(sc(y)), V=lambda y: s * s * np.asarray(cs.V(sc(y))),
        eta=lambda y: s * np.asarray(cs.eta(sc(y))), lam=cs.lam, M=s * s * cs.M, M_eta=s * cs.M_eta,
        eps_modulus=lambda r: cs.eps_modulus(s * np.asarray(r, dtype=float)), I_eps=cs.I_eps,
        domain=HalfBallDomain(cs.d, cs.domain.r_max / s), name=f"{cs.name}*{s!r}", params=cs.params)
    return Solution(value=lambda y: u.value(sc(y)), grad=lambda y: s * np.asarray(u.grad(sc(y))),
                    coefficients=cs_s, name=f"{u.name}*{s!r}", provenance=u.provenance, params=u.params)


def build_problem(cfg: ExperimentConfig) -> Solution:
    u = analytic_solution(cfg.solution.name, cfg.solution.params or None)
    if cfg.coefficients is not None and cfg.coefficients.name != "identity":
        u = manufactured(u, cfg.coefficients.name, cfg.coefficients.params, u_min=cfg.u_min)
    if cfg.chart is not None:
        dom = chart_domain(cfg.chart.name, cfg.chart.params, cfg.chart.chart_radius)
        # the catalogue's eta is built for a flat boundary; rebuild it for the curve
        u = curved_robin_data(u, dom, u_min=cfg.u_min)
        fmap = FlatteningMap(dom, u.coefficients)
        pushed = pushforward_problem(u.coefficients, fmap)
        # rescale so that radius 1 (plus the differencing margin) fits inside
        u = dilated(transform_solution(u, fmap, pushed), pushed.domain.r_max / 1.25)
    return u


# --- running ----------------------------------------------------------------------

class Outcome:
    def __init__(self, name: str):
        self.name = name
        self.files: dict[str, str] = {}
        self.lines: list[str] = []
        self.status = EXIT_OK
        self.error = ""

    def flag(self, status: int):
        self.status = max(self.status, status)


def _plot_script() -> str:
    return "\n".join([
        "# gnuplot script; run from the experiment directory: gnuplot -p plot.gp",
        "set datafile separator ','",
        "set key autotitle columnhead",
        "set multiplot layout 1,2",
        "set xlabel 'r'",
        "plot 'profile.csv' using 1:9 with linespoints title 'N', '' using 1:13 with lines title 'Ntilde'",
        "set logscale xy",
        "set xlabel 'rho'",
        "plot 'doubling.csv' using 1:5 with linespoints title 'h(kappa rho)/h(rho)'",
        "unset multiplot",
        "",
    ])


def analyse(cfg: ExperimentConfig, reports: bool = True) -> Outcome:
    """Run every selected check; never raises for numerical failures."""
    out = Outcome(cfg.name)
    out.files["config.json"] = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"
    try:
        _analyse(cfg, out)
    except (WorkbenchError, ArithmeticError, np.linalg.LinAlgError) as exc:
        out.flag(EXIT_NUMERIC)
        out.error = f"numerical failure: {type(exc).__name__}: {exc}"
        out.lines.append(out.error)
        out.lines.append("PARTIAL OUTPUT: the files of this run are incomplete")
    out.lines.append(f"status: {out.status}")
    out.files["summary.txt"] = "\n".join(out.lines) + "\n"
    if not reports:
        out.files = {"summary.txt": out.files["summary.txt"]}
    return out


def _analyse(cfg: ExperimentConfig, out: Outcome) -> None:
    checks = set(cfg.checks)
    q = QuadratureConfig(cfg.quadrature.n_rad, cfg.quadrature.n_ang)
    u = build_problem(cfg)
    cs = u.coefficients
    out.lines.append(f"experiment: {cfg.name}")
    out.lines.append(f"solution: {u.name}; coefficients: {cs.name}")
    out.lines.append(f"bounds: lambda={cs.lam!r} M={cs.M!r} M_eta={cs.M_eta!r} I_eps={cs.I_eps!r}")
    # random points (seeded) beyond the grid the modulus was estimated on; <= 1 means consistent
    out.lines.append(f"dini modulus sampled ratio: {check_dini_bound(cs, n=500, seed=cfg.seed)!r}")

    if cfg.alpha == "auto":
        alpha, N1_alpha1 = optimal_alpha(u, cs, q)
        out.lines.append(f"alpha: auto -> alpha*={alpha!r} (N(1)={N1_alpha1!r} at alpha=1)")
    else:
        alpha = float(cfg.alpha)
        out.lines.append(f"alpha: {alpha!r}")
    fc = FrequencyConfig(alpha=alpha, r_grid=tuple(_grid(cfg.r_grid)), quadrature=q)
    profile = build_profile(u, cs, fc, residual_tol=cfg.residual_tol)
    ledger = InequalityLedger()

    if "H_derivative" in checks:
        ledger.extend(check_H_derivative(profile, cs))
    if "aux_inequalities" in checks:
        ledger.extend(check_aux_inequalities(u, cs, fc, profile))
    if "trace" in checks:
        ledger.add(check_trace_inequality(u, cs, fc.r_grid, alpha, cfg.delta_grid, q))
    if "cauchy_schwarz" in checks:
        ledger.add(cauchy_schwarz_check(profile))
    if "monotonicity" in checks:
        N1 = frequency_N(u, cs, 1.0, alpha, q) if cs.domain.r_max >= 1 else float(profile.N[-1])
        mono = check_monotonicity(profile, cs, fc, N1=N1)
        ledger.add(mono.entry)
        ledger.add(mono.frequency_bound)
        profile = mono.profile
        out.lines.append(f"corrected frequency nondecreasing: {mono.monotone}")
        if not mono.monotone:
            out.flag(EXIT_VIOLATION)
    if "second_variation" in checks:
        ledger.extend(check_second_variation(u, cs, fc, profile))
        try:
            constant_eta_value(cs)
            ledger.extend(check_second_variation(u, cs, fc, profile, eta_free=True))
        except NotApplicableError:
            pass
    out.files["profile.csv"] = profile.to_csv()

    if "doubling" in checks:
        rep = doubling_report(u, cs, _grid(cfg.rho_grid), cfg.kappa, q)
        ledger.extend(rep.sandwich)
        out.files["doubling.csv"] = rep.to_csv()
        out.lines.append(rep.summary())
        out.lines.append(f"doubling bound holds: {rep.bound_holds()}")
    if "vanishing_order" in checks:
        van = vanishing_order_estimate(u, cs, _grid(cfg.vanishing_grid), q)
        out.files["vanishing.csv"] = van.to_csv()
        out.lines.append(van.summary())
    if "boundary" in checks:
        bg = _grid(cfg.boundary_grid)
        ledger.add(boundary_stability_entry([u], bg, cfg.stability_delta, q))
        ratios = boundary_doubling_ratios(u, bg, q)
        out.files["boundary.csv"] = _table(["r", "boundary_doubling_ratio"], zip(bg, ratios))
        out.lines.append(f"boundary doubling exponent: {float(np.log2(ratios).max())!r}")

    if cfg.fem is not None:
        _fem(cfg, u, out)

    out.files["ledger.csv"] = ledger.to_csv()
    out.files["plot.gp"] = _plot_script()
    out.lines.append(ledger.summary())
    if not ledger.ok:
        out.flag(EXIT_VIOLATION)


def _table(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def _fem(cfg: ExperimentConfig, u: Solution, out: Outcome) -> None:
    from .solutions.fem import convergence_study

    hs = [cfg.fem.h / 2**i for i in range(cfg.fem.levels)]
    errs, ratios = convergence_study(u.coefficients, u.value, hs=hs, R=cfg.fem.R)
    rows = [(h, e, ratios[i - 1] if i else math.nan) for i, (h, e) in enumerate(zip(hs, errs))]
    out.files["fem.csv"] = _table(["h", "l2_error", "ratio"], rows)
    out.lines.append("fem L2 ratios: " + ", ".join(repr(float(r)) for r in ratios))


def write_outcome(out: Outcome, root: Path) -> Path:
    """Single writer: every file of one experiment goes to root/name."""
    d = root / out.name
    d.mkdir(parents=True, exist_ok=True)
    for fname in sorted(out.files):
        (d / fname).write_text(out.files[fname])
    return d


def run_experiments(configs: list[ExperimentConfig], output_dir: Path | None, workers: int = 1,
                    reports: bool = True) -> int:
    """Run the configs (in parallel processes when workers > 1); returns the worst exit code."""
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ValueError("experiment names must be distinct")
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(analyse, configs, [reports] * len(configs)))
    else:
        outcomes = [analyse(c, reports) for c in configs]
    status = EXIT_OK
    for o in outcomes:
        if output_dir is not None and reports:
            write_outcome(o, output_dir)
        log.info("%s: status %d", o.name, o.status)
        sys.stdout.write(o.files["summary.txt"])
        status = max(status, o.status)
    return status


# --- catalogue ----------------------------------------------------------------------

def list_catalogue(machine: bool = False) -> str:
    sections = {
        "solution": sorted(ANALYTIC_SOLUTIONS, key=str.lower),
        "coefficients": sorted(BUILTIN_FIELDS, key=str.lower),
        "chart": sorted(CHARTS, key=str.lower),
        "check": sorted(CHECKS, key=str.lower),
        "config": sorted(BUILTIN_CONFIGS, key=str.lower),
    }
    lines = []
    if machine:
        for kind in sorted(sections):
            lines += [f"{kind}:{n}" for n in sections[kind]]
        return "\n".join(lines) + "\n"
    descr = {
        "solution": {k: v.summary for k, v in ANALYTIC_SOLUTIONS.items()},
        "check": CHECKS,
    }
    for kind in sorted(sections):
        lines.append(f"[{kind}]")
        for n in sections[kind]:
            text = descr.get(kind, {}).get(n, "")
            lines.append(f"  {n}" + (f"  {text}" if text else ""))
    return "\n".join(lines) + "\n"


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robin-ucp", description=__doc__.split("\n")[0])
    p.add_argument("--config", "-c", action="append", default=[],
                   help="config file (YAML/JSON) or built-in config name; repeatable")
    p.add_argument("--output-dir", "-o", default="robin_ucp_out", help="directory for the report files")
    p.add_argument("--workers", "-j", type=int, default=1, help="maximum parallel experiments")
    p.add_argument("--verbose", "-v", action="count", default=0)
    p.add_argument("--list-catalogue", action="store_true", help="list solutions, fields, charts, checks")
    p.add_argument("--machine", action="store_true", help="with --list-catalogue: one name per line")
    p.add_argument("--check-only", action="store_true", help="run the checks without writing reports")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.list_catalogue:
        sys.stdout.write(list_catalogue(args.machine))
        return EXIT_OK
    if not args.config:
        sys.stderr.write("error: give --config (or --list-catalogue)\n")
        return EXIT_CONFIG
    if args.workers < 1:
        sys.stderr.write("error: --workers must be at least 1\n")
        return EXIT_CONFIG
    configs = []
    for src in args.config:
        try:
            configs.append(load_config(src))
        except ValidationError as err:
            sys.stderr.write(f"invalid config {src}:\n{format_validation_error(err)}\n")
            return EXIT_CONFIG
        except (OSError, ValueError, yaml.YAMLError) as err:
            sys.stderr.write(f"invalid config {src}: {err}\n")
            return EXIT_CONFIG
    try:
        return run_experiments(configs, None if args.check_only else Path(args.output_dir), args.workers,
                               reports=not args.check_only)
    except ValueError as err:
        sys.stderr.write(f"invalid config: {err}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
