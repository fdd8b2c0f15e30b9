"""Monte Carlo net-capacity-surplus profiles.

A profile is one equally likely draw of hourly available non-storage
capacity minus load.  Thermal units are sampled with independent hourly
Bernoulli outages; renewable traces are fixed MW additions.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class ThermalUnit:
    id: str
    capacity: float
    efor: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.capacity) or self.capacity < 0:
            raise ValidationError(f"unit {self.id!r}: capacity must be >= 0, got {self.capacity}")
        if not 0.0 <= self.efor <= 1.0:
            raise ValidationError(f"unit {self.id!r}: efor must lie in [0, 1], got {self.efor}")


def _as_trace(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{what} must be a non-empty 1-D series")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite values")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LoadTrace:
    values: np.ndarray
    label: str = "load"

    def __post_init__(self):
        arr = _as_trace(self.values, f"load trace {self.label!r}")
        if np.any(arr < 0):
            raise ValidationError(f"load trace {self.label!r} has negative values")
        object.__setattr__(self, "values", arr)

    @property
    def T(self) -> int:
        return int(self.values.size)

    @property
    def energy(self) -> float:
        return float(self.values.sum())


@dataclass(frozen=True, eq=False)
class SurplusProfile:
    """Net capacity surplus ``P`` for one Monte Carlo draw ``k``.

    ``p_plus`` and ``p_minus`` are the positive and negative parts of ``P``;
    an hour with ``P == 0`` belongs to neither.
    """

    k: int
    P: np.ndarray
    p_plus: np.ndarray = field(init=False, repr=False)
    p_minus: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        P = _as_trace(self.P, f"profile {self.k}")
        object.__setattr__(self, "P", P)
        plus = np.maximum(P, 0.0)
        minus = np.maximum(-P, 0.0)
        plus.setflags(write=False)
        minus.setflags(write=False)
        object.__setattr__(self, "p_plus", plus)
        object.__setattr__(self, "p_minus", minus)

    @property
    def T(self) -> int:
        return int(self.P.size)

    @property
    def deficit_hours(self) -> int:
        return int(np.count_nonzero(self.P < 0))


def sample_availability(units: Sequence[ThermalUnit], T: int, seed: int, k: int) -> np.ndarray:
    """Available thermal capacity per hour for profile ``k``.

    Each unit draws from its own Philox stream keyed by ``(seed, k, unit
    index)``, so the trace does not depend on which worker builds it or in
    what order profiles are produced.
    """
    if T < 1:
        raise ValidationError(f"horizon T must be >= 1, got {T}")
    C = np.zeros(T)
    for u, unit in enumerate(units):
        if unit.efor == 0.0:
            C += unit.capacity
            continue
        gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k, u])))
        up = gen.random(T) >= unit.efor
        C += unit.capacity * up
    return C


def build_profile(C, L, k: int = 0) -> SurplusProfile:
    C = np.asarray(C, dtype=float)
    L = L.values if isinstance(L, LoadTrace) else np.asarray(L, dtype=float)
    if C.shape != L.shape:
        raise ValidationError(f"capacity trace length {C.size} != load length {L.size}")
    return SurplusProfile(k, C - L)


def add_perfect_capacity(profile: SurplusProfile, c: float) -> SurplusProfile:
    """Shift every hour by ``c`` MW of zero-outage capacity (``c`` may be negative)."""
    if c == 0:
        return profile
    return SurplusProfile(profile.k, profile.P + c)


@dataclass(frozen=True, eq=False)
class MonteCarloEnsemble:
    profiles: tuple
    seed: int = 0
    load: LoadTrace | None = None

    def __post_init__(self):
        profiles = tuple(self.profiles)
        if not profiles:
            raise ValidationError("an ensemble needs at least one profile")
        T = profiles[0].T
        if any(p.T != T for p in profiles):
            raise ValidationError("all profiles in an ensemble must share the same horizon")
        if self.load is not None and self.load.T != T:
            raise ValidationError("load trace length does not match profile horizon")
        object.__setattr__(self, "profiles", profiles)

    @property
    def T(self) -> int:
        return self.profiles[0].T

    @property
    def n_profiles(self) -> int:
        return len(self.profiles)

    def __len__(self):
        return len(self.profiles)

    def __iter__(self):
        return iter(self.profiles)

    def matrix(self) -> np.ndarray:
        return np.vstack([p.P for p in self.profiles])

    def shifted(self, c: float) -> "MonteCarloEnsemble":
        return MonteCarloEnsemble(
            tuple(add_perfect_capacity(p, c) for p in self.profiles), self.seed, self.load
        )

    @classmethod
    def from_matrix(cls, P, seed: int = 0, load: LoadTrace | None = None) -> "MonteCarloEnsemble":
        P = np.atleast_2d(np.asarray(P, dtype=float))
        return cls(tuple(SurplusProfile(k, row) for k, row in enumerate(P)), seed, load)


def _profile_job(args):
    units, load, fixed, seed, k = args
    C = sample_availability(units, load.size, seed, k) + fixed
    return build_profile(C, load, k)


def generate_ensemble(
    units: Sequence[ThermalUnit],
    load: LoadTrace,
    n_profiles: int,
    seed: int,
    renewables: Sequence | None = None,
    workers: int = 1,
) -> MonteCarloEnsemble:
    """Draw ``n_profiles`` independent surplus profiles.

    ``renewables`` is a list of fixed hourly MW traces added to the available
    capacity of every profile.
    """
    if n_profiles < 1:
        raise ValidationError(f"n_profiles must be >= 1, got {n_profiles}")
    fixed = np.zeros(load.T)
    for tr in renewables or ():
        tr = np.asarray(tr, dtype=float)
        if tr.shape != fixed.shape:
            raise ValidationError("renewable trace length does not match load horizon")
        fixed += tr
    units = list(units)
    jobs = [(units, load.values, fixed, seed, k) for k in range(n_profiles)]
    if workers > 1 and n_profiles > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            profiles = list(pool.map(_profile_job, jobs, chunksize=max(1, n_profiles // (4 * workers))))
    else:
        profiles = [_profile_job(j) for j in jobs]
    return MonteCarloEnsemble(tuple(profiles), seed, load)
