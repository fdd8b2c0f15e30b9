"""Generic LP container, solver front-end and optimality certificate.

Constraints are rows ``A x = b`` (equality) or ``A x <= b``; variable
bounds may be infinite.  Duals follow the value-function convention used
throughout the package: ``y[i] = dV/db[i]``, ``z_lb >= 0`` and
``z_ub <= 0`` are the reduced costs attributed to the lower and upper
bounds, and stationarity reads ``c = A.T y + z_lb + z_ub``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from ..errors import SolverError, ValidationError
from .simplex import OPTIMAL, simplex_solve

BACKENDS = ("auto", "simplex", "highs")
SIMPLEX_SIZE_LIMIT = 400


@dataclass(eq=False)
class LinearProgram:
    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    is_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    var_names: list | None = None
    row_names: list | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.A = sp.csr_matrix(self.A, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.is_eq = np.asarray(self.is_eq, dtype=bool)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        n = self.c.size
        m = self.b.size
        if self.A.shape != (m, n) or self.is_eq.size != m or self.lb.size != n or self.ub.size != n:
            raise ValidationError(f"inconsistent LP dimensions: A {self.A.shape}, n={n}, m={m}")
        if np.any(self.lb > self.ub):
            raise ValidationError("LP has a variable with lower bound above upper bound")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.b.size


@dataclass
class Certificate:
    primal_residual: float
    stationarity: float
    dual_sign: float
    gap: float
    complementary_slackness: float
    objective: float
    dual_objective: float

    def ok(self, gap_tol=1e-8, cs_tol=1e-8, primal_tol=1e-9, stat_tol=1e-8) -> bool:
        scale = 1.0 + abs(self.objective)
        return (
            self.primal_residual <= primal_tol
            and self.stationarity <= stat_tol * scale
            and self.dual_sign <= stat_tol * scale
            and self.gap <= gap_tol * scale
            and self.complementary_slackness <= cs_tol * scale
        )

    def worst(self) -> float:
        return max(self.primal_residual, self.stationarity, self.dual_sign, self.gap,
                   self.complementary_slackness)


@dataclass(eq=False)
class LpResult:
    status: str
    x: np.ndarray
    objective: float
    y: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    backend: str
    iterations: int = 0
    certificate: Certificate | None = field(default=None)


def certify(lp: LinearProgram, x, y, z_lb, z_ub) -> Certificate:
    """Primal feasibility, dual feasibility, gap and complementary slackness."""
    x = np.asarray(x, dtype=float)
    Ax = lp.A @ x
    r = Ax - lp.b
    eq, le = lp.is_eq, ~lp.is_eq
    primal = max(
        np.abs(r[eq]).max(initial=0.0),
        np.maximum(r[le], 0.0).max(initial=0.0),
        np.maximum(lp.lb - x, 0.0).max(initial=0.0),
        np.maximum(x - lp.ub, 0.0).max(initial=0.0),
    )
    stat = np.abs(lp.c - lp.A.T @ y - z_lb - z_ub).max(initial=0.0)
    sign = max(
        np.maximum(y[le], 0.0).max(initial=0.0),
        np.maximum(-z_lb, 0.0).max(initial=0.0),
        np.maximum(z_ub, 0.0).max(initial=0.0),
        np.abs(z_lb[np.isneginf(lp.lb)]).max(initial=0.0),
        np.abs(z_ub[np.isposinf(lp.ub)]).max(initial=0.0),
    )
    fin_lb = np.isfinite(lp.lb)
    fin_ub = np.isfinite(lp.ub)
    obj = float(lp.c @ x)
    dual = float(lp.b @ y + lp.lb[fin_lb] @ z_lb[fin_lb] + lp.ub[fin_ub] @ z_ub[fin_ub])
    cs = max(
        np.abs(y[le] * r[le]).max(initial=0.0),
        np.abs(z_lb[fin_lb] * (x[fin_lb] - lp.lb[fin_lb])).max(initial=0.0),
        np.abs(z_ub[fin_ub] * (lp.ub[fin_ub] - x[fin_ub])).max(initial=0.0),
    )
    return Certificate(float(primal), float(stat), float(sign), abs(obj - dual), float(cs), obj, dual)


def _solve_highs(lp: LinearProgram):
    eq, le = lp.is_eq, ~lp.is_eq
    A_eq = lp.A[eq] if eq.any() else None
    A_ub = lp.A[le] if le.any() else None
    res = linprog(
        lp.c,
        A_ub=A_ub, b_ub=lp.b[le] if A_ub is not None else None,
        A_eq=A_eq, b_eq=lp.b[eq] if A_eq is not None else None,
        bounds=np.column_stack([
            np.where(np.isfinite(lp.lb), lp.lb, -np.inf),
            np.where(np.isfinite(lp.ub), lp.ub, np.inf),
        ]),
        method="highs-ds",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10,
                 "presolve": True},
    )
    if res.status != 0:
        status = {2: "infeasible", 3: "unbounded"}.get(res.status, "error")
        return LpResult(status, np.full(lp.n, np.nan), np.nan, np.zeros(lp.m), np.zeros(lp.n),
                        np.zeros(lp.n), "highs", int(res.nit or 0))
    y = np.zeros(lp.m)
    if eq.any():
        y[eq] = res.eqlin.marginals
    if le.any():
        y[le] = res.ineqlin.marginals
    x = np.minimum(np.maximum(res.x, lp.lb), lp.ub)
    return LpResult("optimal", x, float(lp.c @ x), y, np.asarray(res.lower.marginals, dtype=float),
                    np.asarray(res.upper.marginals, dtype=float), "highs", int(res.nit or 0))


def _solve_simplex(lp: LinearProgram):
    eq, le = lp.is_eq, ~lp.is_eq
    A = lp.A.toarray()
    r = simplex_solve(lp.c, A[eq], lp.b[eq], A[le], lp.b[le], lp.lb, lp.ub)
    y = np.zeros(lp.m)
    y[np.flatnonzero(eq)] = r.y[: eq.sum()]
    y[np.flatnonzero(le)] = r.y[eq.sum():]
    return LpResult(r.status, r.x, r.objective, y, r.z_lb, r.z_ub, "simplex", r.iterations)


def solve_lp(lp: LinearProgram, backend: str = "auto", check: bool = True) -> LpResult:
    """Solve and certify; raises ``SolverError`` if no certified optimum is found."""
    if backend not in BACKENDS:
        raise ValidationError(f"backend must be one of {BACKENDS}, got {backend!r}")
    if backend == "auto":
        backend = "simplex" if lp.n + lp.m <= SIMPLEX_SIZE_LIMIT else "highs"
    res = _solve_simplex(lp) if backend == "simplex" else _solve_highs(lp)
    if res.status != OPTIMAL:
        raise SolverError(f"LP solve ended with status {res.status!r} ({res.backend})")
    res.certificate = certify(lp, res.x, res.y, res.z_lb, res.z_ub)
    if check and not res.certificate.ok(1e-7, 1e-7, 1e-8, 1e-7):
        raise SolverError(
            f"LP certificate failed ({res.backend}): {res.certificate}", res.certificate.worst()
        )
    return res


def vertex_enumeration(lp: LinearProgram, max_combinations: int = 3_000_000):
    """Optimal value by enumerating every vertex of the feasible polytope.

    Equality rows are eliminated first, so the enumeration runs in the
    null space of ``A_eq`` and only picks ``dim`` active inequalities at a
    time.  Returns ``(objective, x)``, or ``(nan, None)`` when infeasible.
    Requires a bounded feasible region.
    """
    A = lp.A.toarray()
    eq = lp.is_eq
    Aeq, beq = A[eq], lp.b[eq]
    n = lp.n
    if Aeq.shape[0]:
        x_p, *_ = np.linalg.lstsq(Aeq, beq, rcond=None)
        if np.abs(Aeq @ x_p - beq).max() > 1e-9:
            return np.nan, None
        _, s, vt = np.linalg.svd(Aeq)
        rank = int((s > 1e-10 * max(s.max(initial=0.0), 1.0)).sum())
        Z = vt[rank:].T
    else:
        x_p = np.zeros(n)
        Z = np.eye(n)
    dim = Z.shape[1]
    # inequalities G x <= h in original space
    G = [A[~eq]]
    h = [lp.b[~eq]]
    fin_ub = np.isfinite(lp.ub)
    fin_lb = np.isfinite(lp.lb)
    G.append(np.eye(n)[fin_ub])
    h.append(lp.ub[fin_ub])
    G.append(-np.eye(n)[fin_lb])
    h.append(-lp.lb[fin_lb])
    G = np.vstack(G)
    h = np.concatenate(h)
    Gz = G @ Z
    hz = h - G @ x_p
    if dim == 0:
        feas = np.all(hz >= -1e-9)
        return (float(lp.c @ x_p), x_p) if feas else (np.nan, None)
    k = Gz.shape[0]
    n_combos = math.comb(k, dim)
    if n_combos > max_combinations:
        raise ValidationError(f"vertex enumeration needs {n_combos} combinations")
    combos = np.array(list(itertools.combinations(range(k), dim)), dtype=np.intp)
    best, best_x = np.inf, None
    for chunk in np.array_split(combos, max(1, len(combos) // 20000)):
        M = Gz[chunk]
        rhs = hz[chunk]
        det = np.linalg.det(M)
        ok = np.abs(det) > 1e-10
        if not ok.any():
            continue
        zs = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
        viol = (Gz @ zs.T - hz[:, None]).max(axis=0)
        good = viol <= 1e-8 * (1.0 + np.abs(hz).max())
        if not good.any():
            continue
        xs = x_p[None, :] + zs[good] @ Z.T
        vals = xs @ lp.c
        j = int(np.argmin(vals))
        if vals[j] < best:
            best, best_x = float(vals[j]), xs[j]
    if best_x is None:
        return np.nan, None
    return best, best_x
