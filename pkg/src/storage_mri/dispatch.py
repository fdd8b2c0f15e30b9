"""Hourly storage dispatch against a net-surplus profile.

Two rules are provided:

* reliability dispatch: discharge by equalizing time-to-go (SoC / power
  rating) from the top, charge by filling the shortest time-to-go first
  with the same equalization;
* simple dispatch: a fixed priority list charges and discharges each device
  to its limit before moving to the next.

Efficiency losses are applied on charge only.  A device stores at most
``x_bar`` MWh per hour, so the grid draw while charging is the stored
energy divided by ``eta``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .scenario import MonteCarloEnsemble, SurplusProfile

SOC_MODES = ("fixed_s0", "s0_equals_sbar")
RULES = ("reliability", "simple")

_SOC_TOL = 1e-9


@dataclass(frozen=True)
class StorageDevice:
    id: str
    x_bar: float
    s_bar: float
    eta: float = 1.0
    s0: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.x_bar) and self.x_bar > 0):
            raise ValidationError(f"storage {self.id!r}: power capacity must be > 0, got {self.x_bar}")
        if not (np.isfinite(self.s_bar) and self.s_bar >= 0):
            raise ValidationError(f"storage {self.id!r}: energy capacity must be >= 0, got {self.s_bar}")
        if not 0.0 < self.eta <= 1.0:
            raise ValidationError(f"storage {self.id!r}: efficiency must lie in (0, 1], got {self.eta}")
        if not -_SOC_TOL <= self.s0 <= self.s_bar + _SOC_TOL:
            raise ValidationError(
                f"storage {self.id!r}: initial SoC {self.s0} outside [0, {self.s_bar}]"
            )

    @property
    def duration(self) -> float:
        return self.s_bar / self.x_bar

    def replace(self, **changes) -> "StorageDevice":
        return dataclasses.replace(self, **changes)

    def initial_soc(self, soc_mode: str = "fixed_s0") -> float:
        check_soc_mode(soc_mode)
        return self.s_bar if soc_mode == "s0_equals_sbar" else min(max(self.s0, 0.0), self.s_bar)


def check_soc_mode(soc_mode: str) -> None:
    if soc_mode not in SOC_MODES:
        raise ValidationError(f"soc_mode must be one of {SOC_MODES}, got {soc_mode!r}")


def perturb_device(device: StorageDevice, d_power=0.0, d_energy=0.0, soc_mode="fixed_s0") -> StorageDevice:
    """Copy of ``device`` with shifted ratings.

    Under ``fixed_s0`` the initial SoC is held constant, so shrinking the
    energy capacity below it raises ``ValidationError``; under
    ``s0_equals_sbar`` it follows the new energy capacity.
    """
    s_bar = device.s_bar + d_energy
    s0 = s_bar if soc_mode == "s0_equals_sbar" else device.s0
    return device.replace(x_bar=device.x_bar + d_power, s_bar=s_bar, s0=s0)


@dataclass(frozen=True, eq=False)
class DispatchTrajectory:
    """Result of dispatching one profile.

    ``soc`` is end-of-hour state of charge (devices x hours).  ``power`` is
    grid-side power, positive when discharging and equal to minus the grid
    draw when charging.
    """

    device_ids: tuple
    soc: np.ndarray
    power: np.ndarray
    unserved: np.ndarray
    k: int = 0
    rule: str = "reliability"

    @property
    def eue_profile(self) -> float:
        return float(self.unserved.sum())

    @property
    def T(self) -> int:
        return int(self.unserved.size)


def _level_fill(start, cap, weight, target):
    """Amounts ``u_i = clip(start_i - M, 0, cap_i)`` with ``sum(u_i w_i) == target``.

    The common level ``M`` descends from the highest start; if even
    ``u == cap`` cannot reach ``target`` every device is at its cap.
    """
    full = 0.0
    for c, w in zip(cap, weight):
        full += c * w
    if full <= target:
        return list(cap)

    def total(M):
        s = 0.0
        for a, c, w in zip(start, cap, weight):
            v = a - M
            if v > 0.0:
                s += (v if v < c else c) * w
        return s

    pts = sorted({a for a in start} | {a - c for a, c in zip(start, cap)}, reverse=True)
    hi, t_hi = pts[0], 0.0
    M = pts[-1]
    for b in pts[1:]:
        t_b = total(b)
        if t_b >= target:
            M = b + (t_b - target) / (t_b - t_hi) * (hi - b)
            break
        hi, t_hi = b, t_b
    out = []
    for a, c in zip(start, cap):
        v = a - M
        out.append(0.0 if v <= 0.0 else (v if v < c else c))
    return out


def _discharge(deficit, soc, xbar):
    ttg = [s / x for s, x in zip(soc, xbar)]
    cap = [t if t < 1.0 else 1.0 for t in ttg]
    u = _level_fill(ttg, cap, xbar, deficit)
    return [min(ui * x, s) for ui, x, s in zip(u, xbar, soc)]


def _charge(surplus, soc, xbar, sbar, eta):
    # stored-energy headroom this hour, in hours of rated power
    neg_ttg = [-s / x for s, x in zip(soc, xbar)]
    cap = []
    for s, x, b in zip(soc, xbar, sbar):
        h = (b - s) / x
        cap.append(0.0 if h <= 0.0 else (h if h < 1.0 else 1.0))
    w = [x / e for x, e in zip(xbar, eta)]
    u = _level_fill(neg_ttg, cap, w, surplus)
    return [ui * wi for ui, wi in zip(u, w)]


def _fleet_arrays(fleet, soc_mode):
    xbar = [float(d.x_bar) for d in fleet]
    sbar = [float(d.s_bar) for d in fleet]
    eta = [float(d.eta) for d in fleet]
    s0 = [d.initial_soc(soc_mode) for d in fleet]
    return xbar, sbar, eta, s0


def _check_state(soc, fleet):
    if len(soc) != len(fleet):
        raise ValidationError("state vector length does not match fleet size")
    for s, d in zip(soc, fleet):
        if not -_SOC_TOL <= s <= d.s_bar + _SOC_TOL:
            raise ValidationError(f"storage {d.id!r}: SoC {s} outside [0, {d.s_bar}]")


def discharge_step(deficit: float, soc: Sequence[float], fleet: Sequence[StorageDevice]) -> np.ndarray:
    """Per-device discharge (MW) covering ``deficit`` by time-to-go equalization.

    If the fleet cannot deliver the whole deficit every device discharges
    ``min(x_bar, SoC)`` and the remainder is left unserved.
    """
    if not deficit > 0:
        raise ValidationError(f"discharge_step needs a positive deficit, got {deficit}")
    _check_state(soc, fleet)
    if not fleet:
        return np.zeros(0)
    soc = [min(max(float(s), 0.0), d.s_bar) for s, d in zip(soc, fleet)]
    return np.array(_discharge(float(deficit), soc, [d.x_bar for d in fleet]))


def charge_step(surplus: float, soc: Sequence[float], fleet: Sequence[StorageDevice]) -> np.ndarray:
    """Per-device grid draw (MW) absorbing at most ``surplus``.

    Devices with the shortest time-to-go fill first, equalizing time-to-go;
    stored energy is ``eta * draw``.
    """
    if not surplus > 0:
        raise ValidationError(f"charge_step needs a positive surplus, got {surplus}")
    _check_state(soc, fleet)
    if not fleet:
        return np.zeros(0)
    soc = [min(max(float(s), 0.0), d.s_bar) for s, d in zip(soc, fleet)]
    xbar, sbar, eta, _ = _fleet_arrays(fleet, "fixed_s0")
    return np.array(_charge(float(surplus), soc, xbar, sbar, eta))


def _simple_discharge(deficit, soc, xbar, order):
    out = [0.0] * len(soc)
    rem = deficit
    for i in order:
        if rem <= 0.0:
            break
        v = min(xbar[i], soc[i], rem)
        out[i] = v
        rem -= v
    return out


def _simple_charge(surplus, soc, xbar, sbar, eta, order):
    draw = [0.0] * len(soc)
    rem = surplus
    for i in order:
        if rem <= 0.0:
            break
        gain = min(xbar[i], sbar[i] - soc[i], rem * eta[i])
        if gain > 0.0:
            draw[i] = gain / eta[i]
            rem -= draw[i]
    return draw


def _resolve_priority(fleet, priority):
    ids = [d.id for d in fleet]
    if priority is None:
        return list(range(len(fleet)))
    priority = list(priority)
    if sorted(map(str, priority)) != sorted(ids) or len(set(priority)) != len(ids):
        raise ValidationError(f"priority {priority} is not a permutation of fleet ids {ids}")
    index = {d: i for i, d in enumerate(ids)}
    return [index[str(p)] for p in priority]


def _simulate(P, fleet, rule, soc_mode, priority, record):
    xbar, sbar, eta, soc = _fleet_arrays(fleet, soc_mode)
    n = len(soc)
    T = len(P)
    order = _resolve_priority(fleet, priority) if rule == "simple" else None
    unserved_total = 0.0
    if record:
        soc_out = np.empty((n, T))
        pow_out = np.zeros((n, T))
        uns_out = np.zeros(T)
    for t, p in enumerate(P):
        if p > 0.0 and n:
            if any(s < b for s, b in zip(soc, sbar)):
                if rule == "reliability":
                    draw = _charge(p, soc, xbar, sbar, eta)
                else:
                    draw = _simple_charge(p, soc, xbar, sbar, eta, order)
                for i in range(n):
                    if draw[i] > 0.0:
                        s = soc[i] + eta[i] * draw[i]
                        soc[i] = s if s < sbar[i] else sbar[i]
                if record:
                    pow_out[:, t] = [-g for g in draw]
        elif p < 0.0:
            deficit = -p
            if n and any(s > 0.0 for s in soc):
                if rule == "reliability":
                    out = _discharge(deficit, soc, xbar)
                else:
                    out = _simple_discharge(deficit, soc, xbar, order)
                served = 0.0
                for i in range(n):
                    if out[i] > 0.0:
                        s = soc[i] - out[i]
                        soc[i] = s if s > 0.0 else 0.0
                        served += out[i]
                short = deficit - served
                if short < 0.0:
                    short = 0.0
                if record:
                    pow_out[:, t] = out
            else:
                short = deficit
            unserved_total += short
            if record:
                uns_out[t] = short
        if record:
            soc_out[:, t] = soc
    if not record:
        return unserved_total
    return soc_out, pow_out, uns_out


def _check_rule(rule):
    if rule not in RULES:
        raise ValidationError(f"dispatch rule must be one of {RULES}, got {rule!r}")


def run_reliability_dispatch(profile: SurplusProfile, fleet, soc_mode: str = "fixed_s0") -> DispatchTrajectory:
    check_soc_mode(soc_mode)
    fleet = list(fleet)
    soc, power, uns = _simulate(profile.P.tolist(), fleet, "reliability", soc_mode, None, True)
    return DispatchTrajectory(tuple(d.id for d in fleet), soc, power, uns, profile.k, "reliability")


def run_simple_dispatch(profile: SurplusProfile, fleet, priority=None, soc_mode: str = "fixed_s0") -> DispatchTrajectory:
    """Fixed-priority dispatch; ``priority`` lists device ids, default fleet order."""
    check_soc_mode(soc_mode)
    fleet = list(fleet)
    soc, power, uns = _simulate(profile.P.tolist(), fleet, "simple", soc_mode, priority, True)
    return DispatchTrajectory(tuple(d.id for d in fleet), soc, power, uns, profile.k, "simple")


def run_dispatch(profile, fleet, rule="reliability", priority=None, soc_mode="fixed_s0") -> DispatchTrajectory:
    _check_rule(rule)
    if rule == "simple":
        return run_simple_dispatch(profile, fleet, priority, soc_mode)
    return run_reliability_dispatch(profile, fleet, soc_mode)


def profile_eue(P, fleet, rule="reliability", priority=None, soc_mode="fixed_s0") -> float:
    """Unserved energy of one profile without materializing the trajectory."""
    _check_rule(rule)
    check_soc_mode(soc_mode)
    P = P.P if isinstance(P, SurplusProfile) else P
    return _simulate(np.asarray(P, dtype=float).tolist(), list(fleet), rule, soc_mode, priority, False)


def ensemble_eue(ensemble: MonteCarloEnsemble, fleet, rule="reliability", priority=None, soc_mode="fixed_s0") -> float:
    """Mean unserved energy over equally likely profiles."""
    fleet = list(fleet)
    total = 0.0
    for prof in ensemble.profiles:
        total += profile_eue(prof.P, fleet, rule, priority, soc_mode)
    return total / ensemble.n_profiles


def dispatch_ensemble(ensemble, fleet, rule="reliability", priority=None, soc_mode="fixed_s0") -> list:
    return [run_dispatch(p, fleet, rule, priority, soc_mode) for p in ensemble.profiles]
