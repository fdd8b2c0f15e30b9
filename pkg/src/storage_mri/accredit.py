"""Qualified capacity, relative MRI and MRI-based accredited capacity.

A device's accredited capacity is ``QC * MRI / MRI_perfect`` where MRI is
taken along the qualified-capacity rating.  For a combined rating
``QC = beta1 * x_bar + beta2 * s_bar`` the rating direction is ambiguous;
two are offered:

* ``"beta"``: move ``(x_bar, s_bar)`` along ``(beta1, beta2)``;
* ``"proportional"``: scale ``x_bar`` and ``s_bar`` together.

Both make the accredited capacity independent of a rescaling of QC.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dispatch import StorageDevice
from .errors import AccreditationUndefined, InvariantViolation, ValidationError
from .mri import MriResult, lookup

QC_BASES = ("power", "energy", "combo")
DIRECTIONS = ("beta", "proportional")
NEGATIVE_TOL = 1e-9
# Finite differences leave float dust where the exact perfect MRI is zero.
ZERO_PERFECT_TOL = 1e-9


@dataclass(frozen=True)
class QcPolicy:
    basis: str = "power"
    beta1: float = 0.0
    beta2: float = 0.0
    direction: str = "beta"

    def __post_init__(self):
        if self.basis not in QC_BASES:
            raise ValidationError(f"QC basis must be one of {QC_BASES}, got {self.basis!r}")
        if self.direction not in DIRECTIONS:
            raise ValidationError(f"combo direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.basis == "combo":
            if self.beta1 < 0 or self.beta2 < 0 or (self.beta1 == 0 and self.beta2 == 0):
                raise ValidationError("combo QC needs beta1, beta2 >= 0, not both zero")

    @property
    def weights(self):
        if self.basis == "power":
            return 1.0, 0.0
        if self.basis == "energy":
            return 0.0, 1.0
        return float(self.beta1), float(self.beta2)

    def scaled(self, alpha: float) -> "QcPolicy":
        """Policy whose QC is ``alpha`` times this one."""
        b1, b2 = self.weights
        return QcPolicy("combo", alpha * b1, alpha * b2, self.direction)


def qualified_capacity(device: StorageDevice, policy: QcPolicy) -> float:
    b1, b2 = policy.weights
    return b1 * device.x_bar + b2 * device.s_bar


def rating_direction(device: StorageDevice, policy: QcPolicy):
    """``(dx_bar, ds_bar)`` per unit increase of QC."""
    b1, b2 = policy.weights
    if policy.basis == "combo" and policy.direction == "proportional":
        qc = qualified_capacity(device, policy)
        if qc <= 0:
            raise ValidationError(f"device {device.id!r} has zero qualified capacity")
        return device.x_bar / qc, device.s_bar / qc
    norm = b1 * b1 + b2 * b2
    return b1 / norm, b2 / norm


def policy_mri(mri_power: float, mri_energy: float, device: StorageDevice, policy: QcPolicy) -> float:
    """Chain rule: MRI per unit of QC from the two rating MRIs."""
    dx, ds = rating_direction(device, policy)
    return dx * mri_power + ds * mri_energy


@dataclass(frozen=True)
class AccreditationRow:
    id: str
    x_bar: float
    s_bar: float
    duration: float
    qc: float
    mri_power: float
    mri_energy: float
    mri: float
    rmri: float
    qmric: float
    at_breakpoint: bool = False


@dataclass(frozen=True)
class AccreditationReport:
    rows: tuple
    perfect_mri: float
    policy: QcPolicy
    dispatch_rule: str = "reliability"
    seed: int = 0
    metrics: dict = field(default_factory=dict)

    def row(self, device_id) -> AccreditationRow:
        for r in self.rows:
            if r.id == device_id:
                return r
        raise KeyError(device_id)

    def as_dict(self) -> dict:
        return {
            "policy": asdict(self.policy),
            "dispatch_rule": self.dispatch_rule,
            "seed": self.seed,
            "perfect_mri": self.perfect_mri,
            "groups": [asdict(r) for r in self.rows],
            "metrics": dict(self.metrics),
        }


def accredit(fleet, mri_results, perfect, policy: QcPolicy, dispatch_rule="reliability", seed=0,
             metrics=None) -> AccreditationReport:
    """Accredited capacity per device (or aggregated group).

    ``perfect`` is the perfect-capacity MRI (a number or ``MriResult``).
    Raises ``AccreditationUndefined`` when it is zero up to ``ZERO_PERFECT_TOL``.
    """
    perfect = perfect.mri if isinstance(perfect, MriResult) else float(perfect)
    if not perfect > ZERO_PERFECT_TOL:
        raise AccreditationUndefined("system has no marginal shortfall; accreditation undefined")
    rows = []
    for dev in fleet:
        mp = lookup(mri_results, dev.id, "power")
        me = lookup(mri_results, dev.id, "energy")
        mri = policy_mri(mp.mri, me.mri, dev, policy)
        qc = qualified_capacity(dev, policy)
        if mri < -NEGATIVE_TOL:
            raise InvariantViolation(f"device {dev.id!r} has negative MRI {mri}")
        rmri = max(mri, 0.0) / perfect
        rows.append(AccreditationRow(dev.id, dev.x_bar, dev.s_bar, dev.duration, qc, mp.mri, me.mri,
                                     mri, rmri, qc * rmri, mp.at_breakpoint or me.at_breakpoint))
    return AccreditationReport(tuple(rows), perfect, policy, dispatch_rule, seed, dict(metrics or {}))


def qmric_from_policy(device, mri_fn, perfect: float, policy: QcPolicy) -> float:
    """``QC * MRI / perfect`` with MRI from ``mri_fn(dx_bar, ds_bar)``.

    ``mri_fn`` returns minus the EUE derivative along the given rating
    direction per unit of the parameter (e.g. a perturbation oracle).
    """
    dx, ds = rating_direction(device, policy)
    return qualified_capacity(device, policy) * mri_fn(dx, ds) / perfect


def verify_qmric_invariance(device, mri_fn, alpha: float, perfect: float = 1.0,
                            policy: QcPolicy = QcPolicy(), tol: float = 1e-9, atol: float = 1e-9):
    """Compare accredited capacity under ``QC`` and ``alpha * QC``.

    ``mri_fn(dx_bar, ds_bar)`` must differentiate along the direction it is
    given, so the second call measures MRI per unit of the rescaled QC.
    Passes when the values agree to ``tol`` relative or ``atol`` absolute
    (the floor absorbs finite-difference noise around a zero MRI).
    Returns ``(passed, relative_gap, qmric_1, qmric_2)``.
    """
    if not alpha > 0:
        raise ValidationError("alpha must be positive")
    q1 = qmric_from_policy(device, mri_fn, perfect, policy)
    q2 = qmric_from_policy(device, mri_fn, perfect, policy.scaled(alpha))
    diff = abs(q1 - q2)
    scale = max(abs(q1), abs(q2))
    gap = diff / scale if scale > 0 else 0.0
    return bool(diff <= max(tol * scale, atol)), gap, q1, q2


def duration_bucket(duration: float, boundaries) -> int:
    """Index of the half-open bucket ``(lo, hi]`` containing ``duration``."""
    return int(np.searchsorted(np.asarray(boundaries, dtype=float), duration, side="left"))


def bucket_labels(boundaries) -> list:
    edges = [0.0] + [float(b) for b in boundaries] + [float("inf")]
    return [f"({edges[j]:g},{edges[j + 1]:g}]" if np.isfinite(edges[j + 1]) else f"({edges[j]:g},inf)"
            for j in range(len(edges) - 1)]


def aggregate_by_duration(fleet, boundaries=(1.0, 2.0, 4.0)):
    """Merge devices into duration groups.

    Ratings and initial SoC add up; efficiency is the power-weighted mean.
    Returns ``(groups, members)`` where ``members`` maps group id to device
    ids.  Empty buckets are omitted; group ``G<j>`` is bucket ``j`` counted
    from 1.
    """
    boundaries = [float(b) for b in boundaries]
    if boundaries != sorted(boundaries) or len(set(boundaries)) != len(boundaries):
        raise ValidationError("duration boundaries must be strictly ascending")
    buckets = {}
    for dev in fleet:
        if not dev.x_bar > 0:
            raise ValidationError(f"device {dev.id!r} has zero power capacity")
        buckets.setdefault(duration_bucket(dev.duration, boundaries), []).append(dev)
    groups, members = [], {}
    for j in sorted(buckets):
        devs = buckets[j]
        x = sum(d.x_bar for d in devs)
        s = sum(d.s_bar for d in devs)
        eta = sum(d.eta * d.x_bar for d in devs) / x
        s0 = min(sum(d.s0 for d in devs), s)
        gid = f"G{j + 1}"
        groups.append(StorageDevice(gid, x, s, min(eta, 1.0), s0))
        members[gid] = [d.id for d in devs]
    return groups, members
