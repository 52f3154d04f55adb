"""Test solutions: closed-form catalogue and a P1 finite-element Robin solver."""
from .analytic import (ANALYTIC_SOLUTIONS, analytic_solution, bessel_robin_root, manufactured,
                       pointwise_residuals, shooting_robin_eigenvalue)
from .core import Solution, eval_solution, weak_residual, weak_residual_terms

__all__ = [
    "ANALYTIC_SOLUTIONS", "Solution", "analytic_solution", "bessel_robin_root", "eval_solution",
    "manufactured", "pointwise_residuals", "shooting_robin_eigenvalue", "weak_residual",
    "weak_residual_terms",
]
