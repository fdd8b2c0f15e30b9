"""Marginal reliability impact of storage ratings and of perfect capacity.

MRI is minus the derivative of ensemble EUE with respect to a rating.  It
is obtained two ways:

* from LP duals: every rating enters the dispatch LP only through bounds
  and right-hand sides, so the one-sided derivative of the optimum is the
  dual-weighted sum of their one-sided derivatives;
* by perturbation: re-dispatching the ensemble at shifted ratings and
  taking finite differences over a step ladder.

At a breakpoint of the piecewise-linear EUE curve the two one-sided
values differ; the headline MRI is the right derivative (capacity
increase).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dispatch import check_soc_mode, ensemble_eue, perturb_device, profile_eue
from .errors import ValidationError
from .lp.model import build_model, one_sided_derivative, solve
from .scenario import MonteCarloEnsemble

BASES = ("power", "energy")
DEFAULT_STEPS = (1.0, 0.1, 0.01)
STABILITY_TOL = 1e-4
BREAKPOINT_TOL = 1e-6

@dataclass(frozen=True)
class MriResult:
    """MRI of one device along one rating (or of perfect capacity).

    ``mri`` is the headline value: the right derivative at a breakpoint,
    otherwise the two-sided value.  ``left``/``right`` are minus the
    one-sided EUE derivatives for a rating decrease/increase.
    """

    device_id: str
    basis: str
    mri: float
    method: str
    left: float
    right: float
    at_breakpoint: bool = False
    n_profiles: int = 1
    seed: int = 0
    step: float | None = None
    flags: tuple = ()

    def row(self) -> dict:
        return {
            "device_id": self.device_id,
            "qc_basis": self.basis,
            "mri": self.mri,
            "method": self.method,
            "at_breakpoint": self.at_breakpoint,
            "left": self.left,
            "right": self.right,
            "n_profiles": self.n_profiles,
            "seed": self.seed,
        }


def lookup(results, device_id, basis) -> MriResult:
    for r in results:
        if r.device_id == device_id and r.basis == basis:
            return r
    raise KeyError((device_id, basis))


# --- dual route ---------------------------------------------------------------


@dataclass
class ProfileSensitivity:
    """Per-profile EUE and minus the one-sided EUE derivatives."""

    k: int
    eue: float
    power: np.ndarray      # (N, 2): right, left
    energy: np.ndarray     # (N, 2)
    perfect: tuple         # right, left
    zero_hours: int
    certificate_worst: float
    family: np.ndarray = field(default=None)  # (N, 2): power, energy from family sums


def sensitivity_from_solution(sol, exact: bool = False) -> ProfileSensitivity:
    N = sol.model.N
    power = np.empty((N, 2))
    energy = np.empty((N, 2))
    family = np.empty((N, 2))
    for i in range(N):
        for j, side in enumerate(("right", "left")):
            if exact:
                power[i, j] = -one_sided_derivative(sol, ("x_bar", i), side)
                energy[i, j] = -one_sided_derivative(sol, ("s_bar", i), side)
            else:
                power[i, j] = -sol.derivative(("x_bar", i), side)
                energy[i, j] = -sol.derivative(("s_bar", i), side)
        family[i] = sol.family_mri(i)
    perfect = tuple(-sol.eue_derivative(("perfect",), side) for side in ("right", "left"))
    return ProfileSensitivity(
        sol.model.k, sol.eue, power, energy, perfect,
        int(np.count_nonzero(sol.model.P == 0)), sol.certificate.worst(), family,
    )


def _sensitivity_job(args):
    P, k, fleet, soc_mode, backend, segmented = args
    model = build_model(P, fleet, soc_mode)
    model.k = k
    return sensitivity_from_solution(solve(model, backend, segmented))


def ensemble_sensitivities(ensemble: MonteCarloEnsemble, fleet, soc_mode="fixed_s0", backend="auto",
                           segmented="auto", workers: int = 1) -> list:
    """Solve the dispatch LP of every profile and collect its sensitivities."""
    check_soc_mode(soc_mode)
    fleet = tuple(fleet)
    jobs = [(p.P, p.k, fleet, soc_mode, backend, segmented) for p in ensemble.profiles]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sensitivity_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_sensitivity_job(j) for j in jobs]


def _combine(device_id, basis, vals, n_profiles, seed, method, flags=()):
    right, left = float(vals[0]), float(vals[1])
    bp = abs(left - right) > BREAKPOINT_TOL * (1.0 + abs(right))
    return MriResult(device_id, basis, right, method, left, right, bp, n_profiles, seed, None, tuple(flags))


def mri_from_sensitivities(sens: list, fleet, seed: int = 0, method: str = "dual") -> list:
    """Ensemble MRI per device and rating: the mean of per-profile values."""
    fleet = list(fleet)
    if not sens:
        raise ValidationError("no profile sensitivities supplied")
    if any(s.power.shape[0] != len(fleet) for s in sens):
        raise ValidationError("sensitivities do not match the fleet size")
    power = np.mean([s.power for s in sens], axis=0)
    energy = np.mean([s.energy for s in sens], axis=0)
    out = []
    for i, dev in enumerate(fleet):
        out.append(_combine(dev.id, "power", power[i], len(sens), seed, method))
        out.append(_combine(dev.id, "energy", energy[i], len(sens), seed, method))
    return out


def mri_from_duals(solutions, fleet=None, seed: int = 0, exact: bool = False) -> list:
    """MRI per device from solved dispatch LPs (one per profile).

    ``exact`` evaluates each one-sided derivative over the whole optimal
    dual face instead of the returned dual; use it on small models when
    the solution may be degenerate.
    """
    solutions = list(solutions)
    if not solutions:
        raise ValidationError("no LP solutions supplied")
    model_fleet = solutions[0].model.fleet
    if fleet is None:
        fleet = model_fleet
    fleet = list(fleet)
    for sol in solutions:
        if [d.id for d in sol.model.fleet] != [d.id for d in fleet]:
            raise ValidationError("LP solutions were built for a different fleet")
    sens = [sensitivity_from_solution(s, exact) for s in solutions]
    return mri_from_sensitivities(sens, fleet, seed)


def family_mri(sens: list, fleet) -> dict:
    """Ensemble ``{device_id: (power, energy)}`` assembled from family sums."""
    fam = np.mean([s.family for s in sens], axis=0)
    return {d.id: (float(fam[i, 0]), float(fam[i, 1])) for i, d in enumerate(fleet)}


def dual_mri(ensemble, fleet, soc_mode="fixed_s0", backend="auto", segmented="auto", workers=1) -> list:
    """One dual pass: an LP solve per profile, MRI for every rating at once."""
    sens = ensemble_sensitivities(ensemble, fleet, soc_mode, backend, segmented, workers)
    return mri_from_sensitivities(sens, fleet, ensemble.seed)


def perfect_mri_dual(sens: list, seed: int = 0) -> MriResult:
    vals = np.mean([s.perfect for s in sens], axis=0)
    flags = ("zero_surplus_hours",) if any(s.zero_hours for s in sens) else ()
    return _combine("perfect", "perfect", vals, len(sens), seed, "dual", flags)


# --- perturbation route -------------------------------------------------------


def _device_index(fleet, device):
    if isinstance(device, (int, np.integer)):
        if not 0 <= device < len(fleet):
            raise ValidationError(f"device index {device} out of range")
        return int(device)
    for i, d in enumerate(fleet):
        if d.id == device:
            return i
    raise ValidationError(f"unknown device {device!r}")


def _shifted_fleet(fleet, i, basis, delta, soc_mode):
    """Fleet with one rating shifted, or ``None`` if the shift is invalid."""
    dev = fleet[i]
    try:
        if basis == "power":
            if dev.x_bar + delta <= 0:
                return None
            new = perturb_device(dev, d_power=delta, soc_mode=soc_mode)
        else:
            if dev.s_bar + delta < 0:
                return None
            if soc_mode == "fixed_s0" and dev.s_bar + delta < dev.s0:
                return None
            new = perturb_device(dev, d_energy=delta, soc_mode=soc_mode)
    except ValidationError:
        return None
    out = list(fleet)
    out[i] = new
    return out


def _stable_index(values):
    """Index of the smallest step whose value agrees with the previous step."""
    for j in range(1, len(values)):
        a, b = values[j - 1], values[j]
        if abs(a - b) <= STABILITY_TOL * (1.0 + abs(b)):
            return j, True
    return len(values) - 1, False


def _ladder(steps):
    steps = [float(h) for h in steps]
    if not steps or any(h <= 0 for h in steps) or steps != sorted(steps, reverse=True):
        raise ValidationError("steps must be positive and sorted descending")
    return steps


def _finite_difference(eue, base, steps, label, basis, n_profiles, seed):
    """Shared ladder logic; ``eue(delta)`` returns EUE or ``None`` if invalid."""
    fwd, bwd, cen = [], [], []
    forward_only = False
    for h in steps:
        up = eue(h)
        down = eue(-h)
        fwd.append((base - up) / h)
        if down is None:
            forward_only = True
            bwd.append(math.nan)
            cen.append(fwd[-1])
        else:
            bwd.append((down - base) / h)
            cen.append((down - up) / (2 * h))
    j, stable = _stable_index(fwd if forward_only else cen)
    right, left = fwd[j], bwd[j]
    flags = []
    if forward_only:
        flags.append("forward_only")
    if not stable:
        flags.append("unstable")
    bp = (not forward_only) and abs(left - right) > STABILITY_TOL * (1.0 + abs(right))
    mri = right if (bp or forward_only) else cen[j]
    return MriResult(label, basis, float(mri), "perturbation", float(left), float(right), bool(bp),
                     n_profiles, seed, steps[j], tuple(flags))


def mri_perturbation(ensemble, fleet, target, steps=DEFAULT_STEPS, rule="reliability", priority=None,
                     soc_mode="fixed_s0") -> MriResult:
    """Finite-difference MRI by re-dispatching the ensemble.

    ``target`` is ``(device id or index, "power" | "energy")``.  Central
    differences are used unless the backward point is invalid, in which
    case a forward difference is reported and flagged.
    """
    fleet = list(fleet)
    device, basis = target
    if basis not in BASES:
        raise ValidationError(f"basis must be one of {BASES}")
    i = _device_index(fleet, device)
    steps = _ladder(steps)
    base = ensemble_eue(ensemble, fleet, rule, priority, soc_mode)

    def eue(delta):
        f = _shifted_fleet(fleet, i, basis, delta, soc_mode)
        return None if f is None else ensemble_eue(ensemble, f, rule, priority, soc_mode)

    return _finite_difference(eue, base, steps, fleet[i].id, basis, ensemble.n_profiles, ensemble.seed)


def mri_along(ensemble, fleet, device, direction, steps=DEFAULT_STEPS, rule="reliability", priority=None,
              soc_mode="fixed_s0") -> MriResult:
    """Finite-difference MRI along a joint rating direction.

    A parameter step ``t`` moves the device to
    ``(x_bar + t * direction[0], s_bar + t * direction[1])``.
    """
    fleet = list(fleet)
    i = _device_index(fleet, device)
    dx, ds = (float(v) for v in direction)
    steps = _ladder(steps)
    base = ensemble_eue(ensemble, fleet, rule, priority, soc_mode)
    dev = fleet[i]

    def eue(t):
        x, s = dev.x_bar + t * dx, dev.s_bar + t * ds
        if x <= 0 or s < 0 or (soc_mode == "fixed_s0" and s < dev.s0):
            return None
        f = list(fleet)
        f[i] = perturb_device(dev, t * dx, t * ds, soc_mode)
        return ensemble_eue(ensemble, f, rule, priority, soc_mode)

    return _finite_difference(eue, base, steps, dev.id, "direction", ensemble.n_profiles, ensemble.seed)


def perfect_mri(ensemble, fleet, steps=DEFAULT_STEPS, rule="reliability", priority=None,
                soc_mode="fixed_s0") -> MriResult:
    """``-dEUE/dc`` for perfect capacity ``c`` by finite differences.

    Flags ``zero_surplus_hours`` when some hour has ``P == 0`` exactly,
    where EUE may kink at ``c = 0``.
    """
    fleet = list(fleet)
    steps = _ladder(steps)
    base = ensemble_eue(ensemble, fleet, rule, priority, soc_mode)
    res = _finite_difference(
        lambda c: ensemble_eue(ensemble.shifted(c), fleet, rule, priority, soc_mode),
        base, steps, "perfect", "perfect", ensemble.n_profiles, ensemble.seed,
    )
    if np.any(ensemble.matrix() == 0):
        res = MriResult(**{**res.__dict__, "flags": res.flags + ("zero_surplus_hours",)})
    return res


def _cd_job(args):
    P, fleet, rule, priority, soc_mode, i, basis, h = args
    out = []
    for delta in (h, -h):
        f = _shifted_fleet(fleet, i, basis, delta, soc_mode)
        out.append(math.nan if f is None else profile_eue(P, f, rule, priority, soc_mode))
    return out


def central_difference_pass(ensemble, fleet, step: float = 0.01, rule="reliability", priority=None,
                            soc_mode="fixed_s0", workers: int = 1) -> list:
    """MRI for every rating from exactly two re-dispatches per rating.

    The counterpart of one dual pass: ``2 * 2 * len(fleet)`` ensemble
    evaluations, no step ladder.
    """
    fleet = list(fleet)
    jobs = [(p.P, fleet, rule, priority, soc_mode, i, basis, step)
            for i in range(len(fleet)) for basis in BASES for p in ensemble.profiles]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            vals = list(pool.map(_cd_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        vals = [_cd_job(j) for j in jobs]
    vals = np.array(vals).reshape(len(fleet), len(BASES), ensemble.n_profiles, 2).mean(axis=2)
    out = []
    for i, dev in enumerate(fleet):
        for b, basis in enumerate(BASES):
            up, down = vals[i, b]
            mri = (down - up) / (2 * step)
            out.append(MriResult(dev.id, basis, float(mri), "perturbation", math.nan, math.nan, False,
                                 ensemble.n_profiles, ensemble.seed, step))
    return out


# --- sweeps -------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCheck:
    monotone: bool
    convex: bool
    continuous: bool
    min_second_difference: float
    breakpoints: tuple


def optimal_ensemble_eue(ensemble, fleet, soc_mode="fixed_s0", backend="auto") -> float:
    """Mean over profiles of the minimum EUE from the dispatch LP."""
    return float(np.mean([solve(build_model(p.P, fleet, soc_mode), backend).eue for p in ensemble.profiles]))


def eue_sweep(ensemble, fleet, target, grid, rule="reliability", priority=None, soc_mode="fixed_s0",
              evaluator="dispatch") -> list:
    """``(value, EUE)`` pairs with one rating set to each grid value.

    ``evaluator="dispatch"`` re-runs the dispatch rule; ``"lp"`` uses the
    optimal EUE, which differs where the greedy rule is not optimal.
    """
    if evaluator not in ("dispatch", "lp"):
        raise ValidationError("evaluator must be 'dispatch' or 'lp'")
    fleet = list(fleet)
    device, basis = target
    if basis not in BASES:
        raise ValidationError(f"basis must be one of {BASES}")
    i = _device_index(fleet, device)
    grid = [float(v) for v in grid]
    if grid != sorted(grid) or any(v < 0 for v in grid):
        raise ValidationError("sweep grid must be ascending and non-negative")
    dev = fleet[i]
    out = []
    for v in grid:
        if basis == "power":
            delta = v - dev.x_bar
            f = _shifted_fleet(fleet, i, "power", delta, soc_mode)
        else:
            f = list(fleet)
            s0 = v if soc_mode == "s0_equals_sbar" else min(dev.s0, v)
            f[i] = dev.replace(s_bar=v, s0=s0)
        if f is None:
            raise ValidationError(f"grid value {v} is not a valid {basis} rating")
        if evaluator == "lp":
            out.append((v, optimal_ensemble_eue(ensemble, f, soc_mode)))
        else:
            out.append((v, ensemble_eue(ensemble, f, rule, priority, soc_mode)))
    return out


def check_sweep(pairs, lipschitz: float, tol: float = 1e-7) -> SweepCheck:
    """Monotonicity, continuity and convexity of a swept EUE curve.

    Convexity requires second differences ``>= -tol`` (slope differences
    scaled by the step on uneven grids); ``lipschitz`` bounds the EUE change
    per unit of the swept rating.
    """
    v = np.array([p[0] for p in pairs], dtype=float)
    e = np.array([p[1] for p in pairs], dtype=float)
    if v.size < 2:
        return SweepCheck(True, True, True, 0.0, ())
    dv = np.diff(v)
    de = np.diff(e)
    monotone = bool(np.all(de <= tol * (1.0 + np.abs(e[:-1]))))
    continuous = bool(np.all(np.abs(de) <= lipschitz * dv + tol))
    slopes = de / dv
    if np.allclose(dv, dv[0]):
        second = np.diff(de)
    else:
        second = np.diff(slopes) * dv[1:]
    min_second = float(second.min(initial=0.0))
    convex = bool(np.all(second >= -tol))
    kink = np.abs(np.diff(slopes)) > 1e-6 * (1.0 + np.abs(slopes[:-1]))
    bps = tuple(float(v[j + 1]) for j in np.flatnonzero(kink))
    return SweepCheck(monotone, convex, continuous, min_second, bps)
