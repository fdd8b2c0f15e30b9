"""Reliability metrics and installed-capacity sweeps.

Values are per profile horizon (per year for 8760-hour profiles) and are
averaged over equally likely profiles.  A day is a block of 24 consecutive
hours counted from the first hour; a trailing partial block is a day too.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dispatch import SOC_MODES, run_dispatch
from .errors import ValidationError
from .scenario import LoadTrace

TOL_LOSS = 1e-6
NEUE_DENOMINATOR = "total energy of the mean load trace over the horizon"


@dataclass(frozen=True)
class Standards:
    lole: float = 0.1      # days per horizon
    lolh: float = 2.4      # hours per horizon
    neue: float = 0.002    # percent of load energy


@dataclass(frozen=True)
class ReliabilityMetrics:
    eue: float
    lole: float
    lolh: float
    neue: float
    n_profiles: int
    T: int
    tol_loss: float = TOL_LOSS

    def passes(self, standards: Standards) -> dict:
        return {
            "lole": self.lole <= standards.lole,
            "lolh": self.lolh <= standards.lolh,
            "neue": self.neue <= standards.neue,
        }

    def as_dict(self) -> dict:
        d = asdict(self)
        d["neue_denominator"] = NEUE_DENOMINATOR
        return d


def _load_energy(load) -> float:
    if isinstance(load, LoadTrace):
        return load.energy
    arr = np.asarray(load, dtype=float)
    if arr.ndim == 2:
        arr = arr.mean(axis=0)
    return float(arr.sum())


def compute_metrics(unserved, load, tol_loss: float = TOL_LOSS) -> ReliabilityMetrics:
    """Metrics from per-profile hourly unserved energy.

    ``unserved`` is a sequence of trajectories or of hourly arrays sharing
    one horizon; ``load`` is a trace, an array, or one array per profile
    (averaged).
    """
    rows = [np.asarray(getattr(u, "unserved", u), dtype=float) for u in unserved]
    if not rows:
        raise ValidationError("compute_metrics needs at least one profile")
    T = rows[0].size
    if any(r.size != T for r in rows):
        raise ValidationError("all profiles must share the same horizon")
    U = np.vstack(rows)
    eue = float(U.sum(axis=1).mean())
    lost = U > tol_loss
    lolh = float(lost.sum(axis=1).mean())
    n_days = -(-T // 24)
    padded = np.zeros((U.shape[0], n_days * 24), dtype=bool)
    padded[:, :T] = lost
    lole = float(padded.reshape(U.shape[0], n_days, 24).any(axis=2).sum(axis=1).mean())
    energy = _load_energy(load)
    if energy <= 0:
        if eue > 0:
            raise ValidationError("NEUE is undefined: zero total load with nonzero unserved energy")
        neue = 0.0
    else:
        neue = 100.0 * eue / energy
    return ReliabilityMetrics(eue, lole, lolh, neue, U.shape[0], T, tol_loss)


def ensemble_metrics(ensemble, fleet, rule="reliability", priority=None, soc_mode="fixed_s0",
                     load=None) -> ReliabilityMetrics:
    load = ensemble.load if load is None else load
    if load is None:
        raise ValidationError("metrics need a load trace for NEUE")
    trajs = [run_dispatch(p, fleet, rule, priority, soc_mode) for p in ensemble.profiles]
    return compute_metrics(trajs, load)


@dataclass(frozen=True)
class IcrSweep:
    rows: tuple               # (c, ReliabilityMetrics, passes dict)
    standards: Standards
    crossing: dict            # metric -> smallest c meeting the standard, or None

    def table(self) -> list:
        out = []
        for c, m, ok in self.rows:
            out.append({
                "c_mw": c, "eue_mwh": m.eue, "lole_dpy": m.lole, "lolh_hpy": m.lolh,
                "neue_pct": m.neue, "pass_lole": ok["lole"], "pass_lolh": ok["lolh"],
                "pass_neue": ok["neue"],
            })
        return out


def icr_sweep(ensemble, fleet, c_grid, standards: Standards = Standards(), rule="reliability",
              priority=None, soc_mode="fixed_s0") -> IcrSweep:
    """Metrics after adding ``c`` MW of perfect capacity, for each ``c`` in the grid."""
    if soc_mode not in SOC_MODES:
        raise ValidationError(f"soc_mode must be one of {SOC_MODES}")
    c_grid = [float(c) for c in c_grid]
    if c_grid != sorted(c_grid):
        raise ValidationError("c_grid must be sorted ascending")
    rows = []
    for c in c_grid:
        m = ensemble_metrics(ensemble.shifted(c), fleet, rule, priority, soc_mode, ensemble.load)
        rows.append((c, m, m.passes(standards)))
    crossing = {}
    for key in ("lole", "lolh", "neue"):
        crossing[key] = next((c for c, _, ok in rows if ok[key]), None)
    return IcrSweep(tuple(rows), standards, crossing)
