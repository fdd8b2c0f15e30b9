"""Dense bounded-variable primal simplex.

Solves ``min c.x`` subject to ``A_eq x = b_eq``, ``A_ub x <= b_ub`` and
``lb <= x <= ub`` (bounds may be infinite).  Returns basic primal values
together with the row duals and reduced costs of the final basis, using
the sign convention of the value-function gradient: ``y = dV/db``, so
``y <= 0`` on ``<=`` rows, and reduced costs split into ``z_lb >= 0`` and
``z_ub <= 0``.

Intended for small and medium models where exact basic duals matter more
than speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OPTIMAL, INFEASIBLE, UNBOUNDED, ITERATION_LIMIT = "optimal", "infeasible", "unbounded", "iteration_limit"


@dataclass
class SimplexResult:
    status: str
    x: np.ndarray
    objective: float
    y: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    iterations: int


class _Tableau:
    def __init__(self, M, b, cost, lb, ub, basis, x):
        self.M = M
        self.b = b
        self.cost = cost
        self.lb = lb
        self.ub = ub
        self.basis = list(basis)
        self.x = x
        self.refactor()

    def refactor(self):
        B = self.M[:, np.asarray(self.basis, dtype=np.intp)]
        self.Binv = np.linalg.inv(B)
        nonbasic = np.ones(self.M.shape[1], dtype=bool)
        nonbasic[self.basis] = False
        rhs = self.b - self.M[:, nonbasic] @ self.x[nonbasic]
        self.x[self.basis] = self.Binv @ rhs

    def duals(self):
        return self.cost[self.basis] @ self.Binv

    def iterate(self, opt_tol, piv_tol, max_iter, it0):
        M, lb, ub, x = self.M, self.lb, self.ub, self.x
        n = M.shape[1]
        degenerate = 0
        it = it0
        movable = ub > lb
        free = np.isneginf(lb) & np.isposinf(ub)
        while it < max_iter:
            it += 1
            if it % 100 == 0:
                self.refactor()
            y = self.duals()
            d = self.cost - y @ M
            is_basic = np.zeros(n, dtype=bool)
            is_basic[self.basis] = True
            at_lb = ~is_basic & movable & (x <= lb)
            at_ub = ~is_basic & movable & (x >= ub)
            mid = ~is_basic & movable & ~at_lb & ~at_ub
            inc = (at_lb & (d < -opt_tol)) | (mid & (d < -opt_tol))
            dec = (at_ub & (d > opt_tol)) | (mid & (d > opt_tol))
            cand = np.flatnonzero(inc | dec)
            if cand.size == 0:
                return OPTIMAL, it
            if degenerate > 30:
                j = int(cand[0])
            else:
                j = int(cand[np.argmax(np.abs(d[cand]))])
            sigma = 1.0 if inc[j] else -1.0
            alpha = self.Binv @ M[:, j]
            theta = ub[j] - lb[j]
            leave = -1
            basis = np.asarray(self.basis, dtype=np.intp)
            xb = x[basis]
            rows = np.flatnonzero(np.abs(alpha) > piv_tol)
            if rows.size:
                a = sigma * alpha[rows]
                kk = basis[rows]
                with np.errstate(invalid="ignore"):
                    t = np.where(a > 0, np.maximum(xb[rows] - lb[kk], 0.0) / a,
                                 np.maximum(ub[kk] - xb[rows], 0.0) / -a)
                t = np.where(np.isnan(t), np.inf, t)
                tmin = t.min()
                if tmin < theta:
                    ties = np.flatnonzero(t <= tmin + 1e-12)
                    if degenerate > 30:
                        pick = ties[np.argmin(kk[ties])]
                    else:
                        pick = ties[np.argmax(np.abs(a[ties]))]
                    theta = tmin
                    leave = int(rows[pick])
                    leave_to_ub = bool(a[pick] < 0)
            if np.isposinf(theta):
                return UNBOUNDED, it
            degenerate = degenerate + 1 if theta <= 1e-12 else 0
            step = sigma * theta
            x[self.basis] = xb - step * alpha
            x[j] = x[j] + step
            if leave < 0:
                # bound flip of the entering variable
                x[j] = ub[j] if sigma > 0 else lb[j]
                continue
            k = self.basis[leave]
            x[k] = ub[k] if leave_to_ub else lb[k]
            piv = alpha[leave]
            row = self.Binv[leave] / piv
            self.Binv -= np.outer(alpha, row)
            self.Binv[leave] = row
            self.basis[leave] = j
            if free[k]:
                x[k] = 0.0
        return ITERATION_LIMIT, it


def simplex_solve(c, A_eq, b_eq, A_ub, b_ub, lb, ub, tol=1e-9, max_iter=None) -> SimplexResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.asarray(A_eq, dtype=float).reshape(-1, n)
    A_ub = np.asarray(A_ub, dtype=float).reshape(-1, n)
    b_eq = np.asarray(b_eq, dtype=float).ravel()
    b_ub = np.asarray(b_ub, dtype=float).ravel()
    lb = np.asarray(lb, dtype=float).copy()
    ub = np.asarray(ub, dtype=float).copy()
    me, mu = A_eq.shape[0], A_ub.shape[0]
    m = me + mu
    if max_iter is None:
        max_iter = 50 * (n + m) + 1000

    x0 = np.where(np.isfinite(lb), lb, np.where(np.isfinite(ub), ub, 0.0))
    A = np.vstack([A_eq, A_ub])
    b = np.concatenate([b_eq, b_ub])
    resid = b - A @ x0

    # columns: original | slacks | artificials
    slack = np.zeros((m, mu))
    slack[me:, :] = np.eye(mu)
    need_art = np.ones(m, dtype=bool)
    need_art[me:] = resid[me:] < 0
    art_rows = np.flatnonzero(need_art)
    art = np.zeros((m, art_rows.size))
    art[art_rows, np.arange(art_rows.size)] = np.where(resid[art_rows] >= 0, 1.0, -1.0)
    M = np.hstack([A, slack, art])
    ntot = M.shape[1]
    lo = np.concatenate([lb, np.zeros(mu), np.zeros(art_rows.size)])
    hi = np.concatenate([ub, np.full(mu, np.inf), np.full(art_rows.size, np.inf)])
    x = np.concatenate([x0, np.zeros(mu + art_rows.size)])

    basis = []
    art_of_row = {r: n + mu + a for a, r in enumerate(art_rows)}
    for r in range(m):
        if r in art_of_row:
            basis.append(art_of_row[r])
        else:
            basis.append(n + (r - me))

    cost1 = np.zeros(ntot)
    cost1[n + mu:] = 1.0
    tab = _Tableau(M, b, cost1, lo, hi, basis, x)
    it = 0
    if art_rows.size:
        status, it = tab.iterate(tol, 1e-11, max_iter, 0)
        tab.refactor()
        infeas = float(tab.x[n + mu:].sum())
        if status == ITERATION_LIMIT:
            return _result(status, tab, n, me, mu, c, it)
        if infeas > tol * (1.0 + np.abs(b).max(initial=0.0)) * 10:
            return _result(INFEASIBLE, tab, n, me, mu, c, it)
        tab.x[n + mu:] = np.maximum(tab.x[n + mu:], 0.0)
        tab.ub[n + mu:] = 0.0
    cost2 = np.zeros(ntot)
    cost2[:n] = c
    tab.cost = cost2
    status, it = tab.iterate(tol, 1e-11, max_iter, it)
    tab.refactor()
    return _result(status, tab, n, me, mu, c, it)


def _result(status, tab, n, me, mu, c, it):
    x = tab.x[:n].copy()
    y = tab.duals()
    d = c - y @ tab.M[:, :n]
    is_basic = np.zeros(tab.M.shape[1], dtype=bool)
    is_basic[tab.basis] = True
    nb = ~is_basic[:n]
    lb, ub = tab.lb[:n], tab.ub[:n]
    z_lb = np.zeros(n)
    z_ub = np.zeros(n)
    on_lb = nb & (x <= lb) & ((d >= 0) | ~(x >= ub))
    on_ub = nb & ~on_lb & (x >= ub)
    z_lb[on_lb] = d[on_lb]
    z_ub[on_ub] = d[on_ub]
    # clip to exact bounds to remove float dust from the final refactor
    x = np.minimum(np.maximum(x, lb), ub)
    return SimplexResult(status, x, float(c @ x), y[: me + mu], z_lb, z_ub, it)
