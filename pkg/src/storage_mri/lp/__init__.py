"""Dispatch linear programs, their solvers and dual-based derivatives."""

from .core import Certificate, LinearProgram, LpResult, certify, solve_lp, vertex_enumeration
from .model import (
    LpModel, LpSolution, build_model, build_multi, build_single, one_sided_derivative, solve, write_lp,
)
from .segment import solve_segmented, split_hours

__all__ = [
    "Certificate", "LinearProgram", "LpModel", "LpResult", "LpSolution", "build_model", "build_multi",
    "build_single", "certify", "one_sided_derivative", "solve", "solve_lp", "solve_segmented", "split_hours",
    "vertex_enumeration", "write_lp",
]
