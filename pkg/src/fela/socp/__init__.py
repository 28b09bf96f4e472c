"""Sparse standard-form second-order cone programming."""

from fela.socp.problem import (
    ConicProblem,
    ConicProblemError,
    ConicSolution,
    PresolveInfeasibleError,
    PresolveMap,
    ProblemBuilder,
    dump_problem,
    load_problem,
    presolve,
)
from fela.socp.ipm import SolverSettings, solve

__all__ = [
    "ConicProblem",
    "ConicProblemError",
    "ConicSolution",
    "PresolveInfeasibleError",
    "PresolveMap",
    "ProblemBuilder",
    "SolverSettings",
    "dump_problem",
    "load_problem",
    "presolve",
    "solve",
]
