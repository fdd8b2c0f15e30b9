"""Exact decomposition of long-horizon dispatch LPs.

A surplus stretch splits the horizon when the fleet, starting empty, can
be refilled before the stretch's last hour.  Because extra initial energy
never hurts, some optimum then enters the next piece with every device
full, so the pieces solve independently with ``S = s_bar`` as the entering
state.  Pieces without deficit hours are dropped and every piece is cut
after its last deficit hour.

The pieces are solved as one block-diagonal LP.  The full primal is
rebuilt by refilling through the gaps.  Duals outside the pieces are zero
except the upper SoC bound at each split hour, which carries the first
balance-row dual of the following piece.  The pair is certified against the
full model; on any failure the caller falls back to a direct solve.
"""

from __future__ import annotations

import numpy as np

from ..dispatch import _level_fill
from ..errors import InvariantViolation, SolverError
from .core import LinearProgram, certify, solve_lp


def _refill(p, soc, xbar, sbar, eta):
    """One hour of charging that equalizes remaining time-to-full."""
    remaining = [(b - s) / x for s, x, b in zip(soc, xbar, sbar)]
    cap = [0.0 if r <= 0.0 else (r if r < 1.0 else 1.0) for r in remaining]
    w = [x / e for x, e in zip(xbar, eta)]
    u = _level_fill(remaining, cap, w, p)
    out = []
    for s, ui, x, b in zip(soc, u, xbar, sbar):
        s = s + ui * x
        if s >= b - 1e-12 * (1.0 + b):
            s = b
        out.append(s)
    return out


def _runs(mask):
    """Inclusive ``(start, end)`` of maximal True runs."""
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.diff(m)
    return list(zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1) - 1))


def split_hours(P, xbar, sbar, eta):
    """Last hours of surplus stretches that can refill the fleet from empty.

    The refill must complete strictly before the stretch's final hour so
    that the split survives a small increase of any rating.
    """
    P = np.asarray(P, dtype=float)
    xbar, sbar, eta = list(xbar), list(sbar), list(eta)
    need = max((b / x for b, x in zip(sbar, xbar)), default=0.0)
    splits = []
    for a, e in _runs(P > 0):
        if e - a < need - 1e-12:
            continue
        soc = [0.0] * len(xbar)
        full = all(b <= 0.0 for b in sbar)
        for t in range(a, e):
            if full:
                break
            soc = _refill(P[t], soc, xbar, sbar, eta)
            full = all(s >= b for s, b in zip(soc, sbar))
        if full:
            splits.append(int(e))
    return splits


def segments_from_splits(P, splits):
    """Inclusive hour ranges that contain deficits, cut at their last deficit hour."""
    P = np.asarray(P, dtype=float)
    T = P.size
    starts = [0] + [b + 1 for b in splits]
    ends = [b for b in splits] + [T - 1]
    out = []
    for lo, hi in zip(starts, ends):
        if lo > hi:
            continue
        dfc = np.flatnonzero(P[lo:hi + 1] < 0)
        if dfc.size:
            out.append((lo, lo + int(dfc[-1])))
    return out


def _assemble(model, segments, res, cols, rows):
    lp = model.lp
    N, T = model.N, model.T
    NT = N * T
    xbar = [d.x_bar for d in model.fleet]
    sbar = [d.s_bar for d in model.fleet]
    eta = [d.eta if model.rte else 1.0 for d in model.fleet]
    x = np.zeros(lp.n)
    x[cols] = res.x
    S = x[:NT].reshape(N, T)
    D = x[NT:2 * NT].reshape(N, T)
    P = model.P
    in_seg = np.zeros(T, dtype=bool)
    for lo, hi in segments:
        in_seg[lo:hi + 1] = True
    seg_start = {lo for lo, _ in segments}
    if model.soc_mode == "s0_equals_sbar":
        prev = list(sbar)
    else:
        prev = [d.initial_soc("fixed_s0") for d in model.fleet]
    sbar_arr = np.array(sbar)
    t = 0
    while t < T:
        if in_seg[t]:
            prev = S[:, t].tolist()
            t += 1
            continue
        if all(p >= b for p, b in zip(prev, sbar)):
            # already full: hold until the next piece
            nxt = t
            while nxt < T and not in_seg[nxt]:
                nxt += 1
            S[:, t:nxt] = sbar_arr[:, None]
            D[:, t] = sbar_arr - np.array(prev)
            D[:, t + 1:nxt] = 0.0
            prev = list(sbar)
            t = nxt
            continue
        if P[t] > 0:
            new = _refill(P[t], prev, xbar, sbar, eta)
        elif P[t] == 0:
            new = prev
        else:
            raise InvariantViolation("deficit hour outside every piece")
        S[:, t] = new
        D[:, t] = np.array(new) - np.array(prev)
        prev = new
        t += 1
    for lo in sorted(seg_start):
        if lo > 0 and np.any(S[:, lo - 1] < sbar_arr):
            return lo - 1
    # recompute segment-entry changes against the rebuilt state
    for lo in seg_start:
        if lo > 0:
            D[:, lo] = S[:, lo] - S[:, lo - 1]
    if model.per_device_draw:
        gi = model.g_index
        sur = np.flatnonzero(P > 0)
        gap_sur = ~in_seg[sur]
        for i in range(N):
            x[gi[i, gap_sur]] = np.maximum(D[i, sur[gap_sur]], 0.0) / eta[i]
    y = np.zeros(lp.m)
    z_lb = np.zeros(lp.n)
    z_ub = np.zeros(lp.n)
    y[rows] = res.y
    z_lb[cols] = res.z_lb
    z_ub[cols] = res.z_ub
    for lo in seg_start:
        if lo == 0:
            continue
        for i in range(N):
            z_ub[model.s_index(i, lo - 1)] = y[model.balance_row(i, lo)]
    return x, y, z_lb, z_ub


def solve_segmented(model, backend="auto"):
    """Segmented solve; returns ``None`` when the decomposition cannot be certified."""
    from .model import _solution_from
    from .core import LpResult

    lp = model.lp
    P = model.P
    xbar = [d.x_bar for d in model.fleet]
    sbar = [d.s_bar for d in model.fleet]
    eta = [d.eta if model.rte else 1.0 for d in model.fleet]
    splits = split_hours(P, xbar, sbar, eta)
    for _ in range(len(splits) + 1):
        segments = segments_from_splits(P, splits)
        in_seg = np.zeros(model.T, dtype=bool)
        for lo, hi in segments:
            in_seg[lo:hi + 1] = True
        cols = np.flatnonzero(in_seg[model.var_hour])
        rows = np.flatnonzero(in_seg[model.row_hour])
        x_fix = np.zeros(lp.n)
        for lo, _ in segments:
            if lo > 0:
                for i in range(model.N):
                    x_fix[model.s_index(i, lo - 1)] = sbar[i]
        A_rows = lp.A[rows]
        sub = LinearProgram(lp.c[cols], A_rows[:, cols], lp.b[rows] - A_rows @ x_fix,
                            lp.is_eq[rows], lp.lb[cols], lp.ub[cols])
        if sub.n:
            try:
                res = solve_lp(sub, backend)
            except SolverError:
                return None
        else:
            res = LpResult("optimal", np.zeros(0), 0.0, np.zeros(0), np.zeros(0), np.zeros(0), "none")
        built = _assemble(model, segments, res, cols, rows)
        if not isinstance(built, tuple):
            # the rebuilt state missed a full fleet at this split: merge and retry
            splits = [b for b in splits if b != built]
            continue
        x, y, z_lb, z_ub = built
        cert = certify(lp, x, y, z_lb, z_ub)
        if not cert.ok(1e-7, 1e-7, 1e-8, 1e-7):
            return None
        res_full = LpResult("optimal", x, float(lp.c @ x), y, z_lb, z_ub, res.backend, res.iterations, cert)
        return _solution_from(model, res_full, segments)
    return None
