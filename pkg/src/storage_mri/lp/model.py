"""Storage dispatch as a linear program, with named multiplier families.

Variables per device ``i`` and hour ``t``: state of charge ``S[i,t]`` and
its hourly change ``d[i,t] = S[i,t] - S[i,t-1]`` (positive when charging).
With several devices and round-trip losses, grid draws ``g[i,t] >= 0`` on
surplus hours are added.  The objective ``sum of d over deficit hours``
equals minus the energy served by storage; the sign restrictions on ``d``
make it exactly linear, so ``EUE = sum(p_minus) + V``.

Multiplier families (all reported as non-negative numbers):

====  ==========================================
 1    ``S >= 0``
 2    ``S <= s_bar``
 3    ``d >= -x_bar`` (power limit binds on discharge)
 4    ``d <= x_bar`` (power limit binds on charge)
 5    ``d <= p_plus`` (or ``eta * p_plus``; or ``d <= eta * g``)
 6    ``d >= -p_minus``
 7    ``sum_i d <= p_plus`` (or ``sum_i g <= p_plus``)
 8    ``sum_i d >= -p_minus``
====  ==========================================

Each bound on ``d`` is ``min`` of a rating term and a surplus term and is
tagged with whichever is smaller; ties go to the rating family.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..dispatch import StorageDevice, check_soc_mode
from ..errors import SolverError, ValidationError
from ..scenario import SurplusProfile
from .core import Certificate, LinearProgram, certify, solve_lp

FAMILIES = (1, 2, 3, 4, 5, 6, 7, 8)
BALANCE = 0
SIDES = ("right", "left")

VAR_S, VAR_D, VAR_G = 0, 1, 2


def _param_key(param):
    if isinstance(param, str):
        param = (param,)
    param = tuple(param)
    if param[0] in ("x_bar", "s_bar") and len(param) == 2:
        return param
    if param == ("perfect",):
        return param
    raise ValidationError(f"unknown LP parameter {param!r}")


@dataclass(eq=False)
class LpModel:
    P: np.ndarray
    fleet: tuple
    soc_mode: str
    rte: bool
    per_device_draw: bool
    lp: LinearProgram
    lb_fam: np.ndarray
    ub_fam: np.ndarray
    row_fam: np.ndarray
    var_kind: np.ndarray
    var_dev: np.ndarray
    var_hour: np.ndarray
    row_dev: np.ndarray
    row_hour: np.ndarray
    k: int = 0
    g_index: np.ndarray = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return len(self.fleet)

    @property
    def T(self) -> int:
        return int(self.P.size)

    @property
    def p_plus(self):
        return np.maximum(self.P, 0.0)

    @property
    def p_minus(self):
        return np.maximum(-self.P, 0.0)

    def s_index(self, i, t):
        return i * self.T + t

    def d_index(self, i, t):
        return (self.N + i) * self.T + t

    def balance_row(self, i, t):
        return i * self.T + t

    def eue(self, V: float) -> float:
        return float(self.p_minus.sum() + V)

    # --- one-sided derivatives of bounds and right-hand sides -------------

    def rhs_derivatives(self, param, side: str = "right"):
        """Derivatives of ``(lb, ub, b)`` with respect to ``param``.

        ``side='right'`` differentiates for an increase of the parameter and
        ``side='left'`` for a decrease; both are needed because every
        ``d`` bound is a ``min`` of two terms.  For ``"perfect"``, hours with
        ``P == 0`` have no aggregate rows, so the result there is only valid
        when no such hour exists.
        """
        param = _param_key(param)
        if side not in SIDES:
            raise ValidationError(f"side must be one of {SIDES}")
        right = side == "right"
        N, T = self.N, self.T
        n, m = self.lp.n, self.lp.m
        dlb, dub, db = np.zeros(n), np.zeros(n), np.zeros(m)
        xbar = np.array([d.x_bar for d in self.fleet])
        eta = np.array([d.eta for d in self.fleet]) if self.rte else np.ones(N)
        pp, pm = self.p_plus, self.p_minus
        d_slice = slice(N * T, 2 * N * T)

        def min_dir(a, da, b, db_):
            # one-sided derivative of min(a, b)
            tie = np.where(right, np.minimum(da, db_), np.maximum(da, db_))
            return np.where(a < b, da, np.where(a > b, db_, tie))

        if param[0] == "x_bar":
            i = param[1]
            if not 0 <= i < N:
                raise ValidationError(f"device index {i} out of range")
            one, zero = np.ones(T), np.zeros(T)
            lo = -min_dir(np.full(T, xbar[i]), one, pm, zero)
            if self.per_device_draw:
                up = np.where(self.P > 0, 1.0, 0.0)
            else:
                up = min_dir(np.full(T, xbar[i]), one, eta[i] * pp, zero)
            dlb[d_slice][i * T:(i + 1) * T] = lo
            dub[d_slice][i * T:(i + 1) * T] = up
        elif param[0] == "s_bar":
            i = param[1]
            if not 0 <= i < N:
                raise ValidationError(f"device index {i} out of range")
            dub[i * T:(i + 1) * T] = 1.0
            if self.soc_mode == "s0_equals_sbar":
                db[self.balance_row(i, 0)] = 1.0
        else:
            P = self.P
            if right:
                dpp = np.where(P >= 0, 1.0, 0.0)
                dpm = np.where(P < 0, -1.0, 0.0)
            else:
                dpp = np.where(P > 0, 1.0, 0.0)
                dpm = np.where(P <= 0, -1.0, 0.0)
            zero = np.zeros(T)
            lo = np.empty((N, T))
            up = np.empty((N, T))
            for i in range(N):
                lo[i] = -min_dir(np.full(T, xbar[i]), zero, pm, dpm)
                if self.per_device_draw:
                    up[i] = 0.0
                else:
                    up[i] = min_dir(np.full(T, xbar[i]), zero, eta[i] * pp, eta[i] * dpp)
            dlb[d_slice] = lo.ravel()
            dub[d_slice] = up.ravel()
            r7 = self.row_fam == 7
            r8 = self.row_fam == 8
            db[r7] = dpp[self.row_hour[r7]]
            db[r8] = dpm[self.row_hour[r8]]
        return dlb, dub, db

    def to_lp(self) -> LinearProgram:
        return self.lp


def _device_arrays(fleet):
    xbar = np.array([d.x_bar for d in fleet], dtype=float)
    sbar = np.array([d.s_bar for d in fleet], dtype=float)
    eta = np.array([d.eta for d in fleet], dtype=float)
    return xbar, sbar, eta


def build_model(profile, fleet, soc_mode: str = "fixed_s0", rte_enabled=None, aggregate_rows=None) -> LpModel:
    """Dispatch LP for one profile.

    ``rte_enabled=None`` turns loss modelling on whenever some device has
    ``eta < 1``.  ``aggregate_rows`` defaults to ``len(fleet) > 1``; the
    aggregate families 7 and 8 are redundant for a single device.
    """
    check_soc_mode(soc_mode)
    fleet = tuple(fleet)
    if not fleet:
        raise ValidationError("the dispatch LP needs at least one storage device")
    for dev in fleet:
        if not isinstance(dev, StorageDevice):
            raise ValidationError(f"fleet entries must be StorageDevice, got {type(dev).__name__}")
    if isinstance(profile, SurplusProfile):
        P, k = profile.P, profile.k
    else:
        P, k = np.asarray(profile, dtype=float), 0
    P = np.asarray(P, dtype=float)
    N, T = len(fleet), P.size
    xbar, sbar, eta = _device_arrays(fleet)
    if rte_enabled is None:
        rte_enabled = bool(np.any(eta < 1.0))
    if not rte_enabled:
        eta = np.ones(N)
    if aggregate_rows is None:
        aggregate_rows = N > 1
    per_device_draw = bool(rte_enabled and aggregate_rows and np.any(eta < 1.0))

    pp = np.maximum(P, 0.0)
    pm = np.maximum(-P, 0.0)
    sur = np.flatnonzero(P > 0)
    dfc = np.flatnonzero(P < 0)
    n_sur = sur.size
    NT = N * T
    n_g = N * n_sur if per_device_draw else 0
    n = 2 * NT + n_g

    X = xbar[:, None]
    # bounds
    S_lb = np.zeros(NT)
    S_ub = np.repeat(sbar, T)
    d_lo_mag = np.minimum(X, pm[None, :])
    d_lb = -d_lo_mag
    d_lb_fam = np.where(X <= pm[None, :], 3, 6)
    if per_device_draw:
        d_ub = np.where((P > 0)[None, :], X, 0.0) * np.ones((N, 1))
        d_ub_fam = np.where((P > 0)[None, :], 4, 5) * np.ones((N, 1), dtype=int)
    else:
        cap = eta[:, None] * pp[None, :]
        d_ub = np.minimum(X, cap)
        d_ub_fam = np.where(X <= cap, 4, 5)
    lb = np.concatenate([S_lb, d_lb.ravel(), np.zeros(n_g)])
    ub = np.concatenate([S_ub, d_ub.ravel(), np.full(n_g, np.inf)])
    lb_fam = np.concatenate([np.full(NT, 1), d_lb_fam.ravel(), np.full(n_g, -1)]).astype(np.int8)
    ub_fam = np.concatenate([np.full(NT, 2), d_ub_fam.ravel(), np.full(n_g, -1)]).astype(np.int8)

    c = np.zeros(n)
    cost_d = np.zeros((N, T))
    cost_d[:, dfc] = 1.0
    c[NT:2 * NT] = cost_d.ravel()

    var_kind = np.concatenate([np.zeros(NT), np.ones(NT), np.full(n_g, 2)]).astype(np.int8)
    hours = np.tile(np.arange(T), N)
    devs = np.repeat(np.arange(N), T)
    g_dev = np.repeat(np.arange(N), n_sur)
    g_hour = np.tile(sur, N)
    var_dev = np.concatenate([devs, devs, g_dev[:n_g]])
    var_hour = np.concatenate([hours, hours, g_hour[:n_g]])

    # balance rows: S[i,t] - S[i,t-1] - d[i,t] = rhs
    s_idx = np.arange(NT)
    rows = [s_idx, s_idx]
    cols = [s_idx, NT + s_idx]
    vals = [np.ones(NT), -np.ones(NT)]
    later = s_idx[hours > 0]
    rows.append(later)
    cols.append(later - 1)
    vals.append(-np.ones(later.size))
    b_bal = np.zeros(NT)
    if soc_mode == "s0_equals_sbar":
        b_bal[np.arange(N) * T] = sbar
    else:
        b_bal[np.arange(N) * T] = [d.initial_soc("fixed_s0") for d in fleet]
    row_fam = [np.zeros(NT, dtype=np.int8)]
    row_dev = [devs]
    row_hour = [hours]
    b_parts = [b_bal]
    r0 = NT

    g_index = None
    if per_device_draw:
        g_index = 2 * NT + np.arange(n_g).reshape(N, n_sur)
        # sum_i g[i,t] <= p_plus[t]
        rr = r0 + np.tile(np.arange(n_sur), N)
        rows.append(rr)
        cols.append(g_index.ravel())
        vals.append(np.ones(n_g))
        row_fam.append(np.full(n_sur, 7, dtype=np.int8))
        row_dev.append(np.full(n_sur, -1))
        row_hour.append(sur)
        b_parts.append(pp[sur])
        r0 += n_sur
        # d[i,t] - eta_i g[i,t] <= 0
        rr = r0 + np.arange(n_g)
        d_cols = NT + (g_dev * T + g_hour)
        rows += [rr, rr]
        cols += [d_cols, g_index.ravel()]
        vals += [np.ones(n_g), -np.repeat(eta, n_sur)]
        row_fam.append(np.full(n_g, 5, dtype=np.int8))
        row_dev.append(g_dev)
        row_hour.append(g_hour)
        b_parts.append(np.zeros(n_g))
        r0 += n_g
    elif aggregate_rows and n_sur:
        rr = r0 + np.tile(np.arange(n_sur), N)
        rows.append(rr)
        cols.append(NT + (g_dev * T + g_hour))
        vals.append(np.ones(N * n_sur))
        row_fam.append(np.full(n_sur, 7, dtype=np.int8))
        row_dev.append(np.full(n_sur, -1))
        row_hour.append(sur)
        b_parts.append(pp[sur])
        r0 += n_sur
    if aggregate_rows and dfc.size:
        n_dfc = dfc.size
        rr = r0 + np.tile(np.arange(n_dfc), N)
        dd = np.repeat(np.arange(N), n_dfc)
        rows.append(rr)
        cols.append(NT + dd * T + np.tile(dfc, N))
        vals.append(-np.ones(N * n_dfc))
        row_fam.append(np.full(n_dfc, 8, dtype=np.int8))
        row_dev.append(np.full(n_dfc, -1))
        row_hour.append(dfc)
        b_parts.append(pm[dfc])
        r0 += n_dfc

    m = r0
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, n)
    )
    row_fam = np.concatenate(row_fam)
    is_eq = row_fam == BALANCE
    lp = LinearProgram(c, A, np.concatenate(b_parts), is_eq, lb, ub)
    return LpModel(
        P=P, fleet=fleet, soc_mode=soc_mode, rte=bool(rte_enabled), per_device_draw=per_device_draw,
        lp=lp, lb_fam=lb_fam, ub_fam=ub_fam, row_fam=row_fam, var_kind=var_kind,
        var_dev=var_dev, var_hour=var_hour, row_dev=np.concatenate(row_dev),
        row_hour=np.concatenate(row_hour), k=k, g_index=g_index,
    )


def build_single(profile, device: StorageDevice, soc_mode="fixed_s0", rte_enabled=None) -> LpModel:
    return build_model(profile, [device], soc_mode, rte_enabled, aggregate_rows=False)


def build_multi(profile, fleet, soc_mode="fixed_s0", rte_enabled=None) -> LpModel:
    return build_model(profile, fleet, soc_mode, rte_enabled)


@dataclass(eq=False)
class LpSolution:
    """Optimal primal/dual pair of an ``LpModel``.

    Raw duals use the value-gradient convention of ``lp.core``;
    ``multipliers`` converts them to non-negative family values.
    """

    model: LpModel
    status: str
    x: np.ndarray
    objective: float
    y: np.ndarray
    z_lb: np.ndarray
    z_ub: np.ndarray
    certificate: Certificate
    backend: str = ""
    segments: tuple = ()

    @property
    def V(self) -> float:
        return self.objective

    @property
    def eue(self) -> float:
        return self.model.eue(self.objective)

    @property
    def soc(self) -> np.ndarray:
        m = self.model
        return self.x[: m.N * m.T].reshape(m.N, m.T)

    @property
    def change(self) -> np.ndarray:
        m = self.model
        return self.x[m.N * m.T: 2 * m.N * m.T].reshape(m.N, m.T)

    def multipliers(self, family: int) -> np.ndarray:
        """Non-negative multipliers of one family.

        Per-device families return an ``(N, T)`` array, families 7 and 8 a
        length-``T`` array (zero on hours where the row is absent).
        """
        m = self.model
        N, T = m.N, m.T
        if family not in FAMILIES:
            raise ValidationError(f"unknown multiplier family {family!r}")
        if family in (7, 8):
            out = np.zeros(T)
            rows = np.flatnonzero(m.row_fam == family)
            np.add.at(out, m.row_hour[rows], -self.y[rows])
            return out
        out = np.zeros((N, T))
        lbm = np.flatnonzero(m.lb_fam == family)
        ubm = np.flatnonzero(m.ub_fam == family)
        np.add.at(out, (m.var_dev[lbm], m.var_hour[lbm]), self.z_lb[lbm])
        np.add.at(out, (m.var_dev[ubm], m.var_hour[ubm]), -self.z_ub[ubm])
        if family == 5:
            rows = np.flatnonzero((m.row_fam == 5))
            np.add.at(out, (m.row_dev[rows], m.row_hour[rows]), -self.y[rows])
        return out

    def initial_soc_multiplier(self) -> np.ndarray:
        """Minus the dual of the first-hour balance row per device (``>= 0``)."""
        m = self.model
        return -self.y[[m.balance_row(i, 0) for i in range(m.N)]]

    def derivative(self, param, side: str = "right") -> float:
        """Directional derivative of ``V`` from the current duals."""
        dlb, dub, db = self.model.rhs_derivatives(param, side)
        return float(self.z_lb @ dlb + self.z_ub @ dub + self.y @ db)

    def eue_derivative(self, param, side: str = "right") -> float:
        param = _param_key(param)
        dV = self.derivative(param, side)
        if param == ("perfect",):
            P = self.model.P
            count = np.count_nonzero(P < 0) if side == "right" else np.count_nonzero(P <= 0)
            return dV - count
        return dV

    def family_mri(self, i: int):
        """``(power, energy)`` MRI assembled from family sums.

        Power: families 3 and 4 of device ``i``; energy: family 2, plus the
        first-hour balance multiplier when the initial SoC tracks ``s_bar``.
        """
        power = self.multipliers(3)[i].sum() + self.multipliers(4)[i].sum()
        energy = self.multipliers(2)[i].sum()
        if self.model.soc_mode == "s0_equals_sbar":
            energy += self.initial_soc_multiplier()[i]
        return float(power), float(energy)


def _solution_from(model, res, segments=()):
    return LpSolution(model, res.status, res.x, res.objective, res.y, res.z_lb, res.z_ub,
                      res.certificate, res.backend, tuple(segments))


def solve(model: LpModel, backend: str = "auto", segmented="auto") -> LpSolution:
    """Solve a dispatch LP and return a certified primal/dual pair.

    ``segmented`` splits the horizon at surplus stretches long enough to
    refill every device from empty and solves only the pieces containing
    deficit hours; the pieces are reassembled into an optimal primal/dual
    pair of the full model and certified against it.  ``"auto"`` enables it
    for long horizons.
    """
    from .segment import solve_segmented

    if segmented == "auto":
        segmented = model.T > 336
    if segmented:
        sol = solve_segmented(model, backend)
        if sol is not None:
            return sol
    res = solve_lp(model.lp, backend)
    return _solution_from(model, res)


def one_sided_derivative(solution: LpSolution, param, side: str = "right") -> float:
    """Exact one-sided derivative of ``V`` over the whole optimal dual face.

    The right derivative is the largest, and the left derivative the
    smallest, directional product over all optimal duals.  Solves an
    auxiliary LP the size of the dual, so it is meant for small models.
    """
    from scipy.optimize import linprog

    model = solution.model
    lp = model.lp
    dlb, dub, db = model.rhs_derivatives(param, side)
    n, m = lp.n, lp.m
    fin_lb = np.isfinite(lp.lb)
    fin_ub = np.isfinite(lp.ub)
    # variables: y (m), z_lb (n), z_ub (n)
    A_T = lp.A.T.tocsr()
    I = sp.identity(n, format="csr")
    A_eq = sp.vstack([
        sp.hstack([A_T, I, I]),
        sp.csr_matrix(np.concatenate([lp.b, np.where(fin_lb, lp.lb, 0.0), np.where(fin_ub, lp.ub, 0.0)])[None, :]),
    ]).tocsr()
    b_eq = np.concatenate([lp.c, [solution.objective]])
    y_bounds = [(None, None) if e else (None, 0.0) for e in lp.is_eq]
    zl_bounds = [(0.0, None) if f else (0.0, 0.0) for f in fin_lb]
    zu_bounds = [(None, 0.0) if f else (0.0, 0.0) for f in fin_ub]
    obj = np.concatenate([db, dlb, dub])
    sense = -1.0 if side == "right" else 1.0
    res = linprog(sense * obj, A_eq=A_eq, b_eq=b_eq, bounds=y_bounds + zl_bounds + zu_bounds,
                  method="highs")
    if res.status != 0:
        # relax the optimality equation slightly for numerically tight faces
        tol = 1e-9 * (1.0 + abs(solution.objective))
        A_ub = sp.vstack([A_eq[-1], -A_eq[-1]])
        res = linprog(sense * obj, A_eq=A_eq[:-1], b_eq=b_eq[:-1],
                      A_ub=A_ub, b_ub=[solution.objective + tol, -solution.objective + tol],
                      bounds=y_bounds + zl_bounds + zu_bounds, method="highs")
        if res.status != 0:
            raise SolverError(f"dual-face LP failed: {res.message}")
    return float(sense * res.fun)


def _lp_names(model: LpModel):
    kinds = {VAR_S: "S", VAR_D: "d", VAR_G: "g"}
    return [f"{kinds[int(k)]}_{int(i) + 1}_{int(t) + 1}"
            for k, i, t in zip(model.var_kind, model.var_dev, model.var_hour)]


def _num(v) -> str:
    return repr(float(v) + 0.0)


def _lp_expr(coeffs) -> str:
    return " ".join(f"{'-' if v < 0 else '+'} {_num(abs(v))} {name}" for name, v in coeffs)


def write_lp(model: LpModel, path) -> None:
    """Dump the model in CPLEX LP text format for external solvers.

    Variable bounds are written as named rows ``lam_<family>_<device>_<hour>``
    (aggregate rows use ``all`` as the device) so every multiplier family
    can be read back by name; balance rows are ``bal_<device>_<hour>``.
    Devices and hours count from 1.
    """
    lp = model.lp
    names = _lp_names(model)
    lines = [f"\\ storage dispatch LP, profile {model.k}, N={model.N}, T={model.T}, soc_mode={model.soc_mode}",
             "Minimize"]
    obj = [(names[j], lp.c[j]) for j in np.flatnonzero(lp.c)]
    lines.append(" obj: " + (_lp_expr(obj) if obj else "0 " + names[0]))
    lines.append("Subject To")
    A = lp.A.tocsr()
    for r in range(lp.m):
        lo, hi = A.indptr[r], A.indptr[r + 1]
        coeffs = [(names[j], v) for j, v in zip(A.indices[lo:hi], A.data[lo:hi])]
        fam = int(model.row_fam[r])
        dev = "all" if model.row_dev[r] < 0 else str(int(model.row_dev[r]) + 1)
        label = "bal" if fam == BALANCE else f"lam_{fam}"
        sense = "=" if lp.is_eq[r] else "<="
        lines.append(f" {label}_{dev}_{int(model.row_hour[r]) + 1}: {_lp_expr(coeffs)} {sense} {_num(lp.b[r])}")
    free = []
    for j, name in enumerate(names):
        tail = name.split("_", 1)[1]
        if model.lb_fam[j] > 0:
            lines.append(f" lam_{int(model.lb_fam[j])}_{tail}: + 1.0 {name} >= {_num(lp.lb[j])}")
        if model.ub_fam[j] > 0:
            lines.append(f" lam_{int(model.ub_fam[j])}_{tail}: + 1.0 {name} <= {_num(lp.ub[j])}")
        if model.lb_fam[j] > 0 or not np.isfinite(lp.lb[j]):
            free.append(name)
    lines.append("Bounds")
    lines += [f" {name} free" for name in free]
    lines.append("End")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
