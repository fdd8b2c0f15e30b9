"""Synthetic systems and random instances for experiments and tests.

``summer_peaking_system`` builds an 8760-hour system whose shortfalls
cluster on summer afternoons, with storage in four duration groups.
``random_instance`` draws small adequacy-style profiles (diurnal load
against a thermal fleet with hourly outages) together with a random
storage fleet.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dispatch import StorageDevice
from .scenario import LoadTrace, MonteCarloEnsemble, ThermalUnit, generate_ensemble

DURATION_BOUNDARIES = (1.0, 2.0, 4.0)


def diurnal_load(T: int, peak: float, summer: bool = True, start_day: int = 0) -> np.ndarray:
    """Hourly load with an afternoon peak and, optionally, a summer bump."""
    h = np.arange(T)
    hod = h % 24
    day = start_day + h // 24
    season = np.exp(-(((day % 365) - 200) / 40.0) ** 2) if summer else np.zeros(T)
    afternoon = np.clip(np.sin(2 * np.pi * (hod - 9) / 24.0), 0.0, None)
    night = 0.5 * (1 + np.cos(2 * np.pi * (hod - 4) / 24.0))
    weekday = np.where((day % 7) < 5, 1.0, 0.95)
    shape = 0.58 + 0.08 * season + (0.14 + 0.2 * season) * afternoon - 0.04 * night
    return peak * shape * weekday


@dataclass(frozen=True)
class SyntheticSystem:
    units: tuple
    load: LoadTrace
    storage: tuple
    boundaries: tuple = DURATION_BOUNDARIES

    def ensemble(self, n_profiles: int, seed: int, workers: int = 1) -> MonteCarloEnsemble:
        return generate_ensemble(self.units, self.load, n_profiles, seed, workers=workers)


def summer_peaking_system(T: int = 8760, peak: float = 1000.0, reserve: float = 0.06,
                          seed: int = 7, storage_scale: float = 1.0) -> SyntheticSystem:
    """A summer-peaking test system with storage in four duration groups.

    Thermal units total ``(1 + reserve) * peak`` MW; storage power is a few
    percent of peak with durations spread over (0,1], (1,2], (2,4] and
    (4, inf) hours.
    """
    rng = np.random.default_rng(seed)
    load = LoadTrace(diurnal_load(T, peak), "summer-peaking")
    sizes = rng.choice([20.0, 40.0, 60.0, 100.0], size=60, p=[0.3, 0.35, 0.2, 0.15])
    sizes *= (1.0 + reserve) * peak / sizes.sum()
    efor = rng.uniform(0.03, 0.09, sizes.size)
    units = tuple(ThermalUnit(f"G{u:02d}", float(c), float(f)) for u, (c, f) in enumerate(zip(sizes, efor)))
    groups = [
        (0.5, 0.9, 3, 12.0),
        (1.2, 2.0, 3, 4.0),
        (2.5, 4.0, 2, 3.0),
        (5.0, 8.0, 2, 3.0),
    ]
    storage = []
    for g, (dlo, dhi, count, total_mw) in enumerate(groups):
        shares = rng.dirichlet(np.ones(count))
        for j in range(count):
            x = total_mw * storage_scale * shares[j] * peak / 1000.0
            dur = rng.uniform(dlo, dhi)
            storage.append(StorageDevice(f"B{g + 1}{j + 1}", float(x), float(x * dur), 1.0, float(x * dur)))
    return SyntheticSystem(units, load, tuple(storage))


def random_profile(rng, T: int, n_units: int = 12, peak: float = 100.0, margin=(1.08, 1.2)) -> np.ndarray:
    """Net surplus of a small thermal fleet with hourly outages against diurnal load."""
    load = diurnal_load(T, peak, summer=False, start_day=int(rng.integers(0, 365)))
    load = load * rng.uniform(0.95, 1.05)
    caps = rng.uniform(5.0, 20.0, n_units)
    caps *= rng.uniform(*margin) * load.max() / caps.sum()
    efor = rng.uniform(0.03, 0.12, n_units)
    avail = rng.random((n_units, T)) >= efor[:, None]
    return (caps[:, None] * avail).sum(axis=0) - load


def random_fleet(rng, n: int, eta=1.0, soc="random", durations=(0.5, 1.0, 2.0, 4.0, 6.0, 8.0)) -> list:
    """Random storage fleet; ``eta`` may be a number or ``"random"``."""
    fleet = []
    for i in range(n):
        x = float(rng.uniform(1.0, 8.0))
        dur = float(rng.choice(durations) * rng.uniform(0.8, 1.2))
        s = x * dur
        e = float(rng.uniform(0.7, 1.0)) if eta == "random" else float(eta)
        if soc == "random":
            s0 = float(s * rng.uniform(0.0, 1.0))
        elif soc == "full":
            s0 = s
        else:
            s0 = 0.0
        fleet.append(StorageDevice(f"S{i + 1}", x, s, e, s0))
    return fleet


def random_instance(rng, n_max: int = 4, t_min: int = 24, t_max: int = 168, eta=1.0, soc="random"):
    """``(P, fleet)`` with a random horizon and between 1 and ``n_max`` devices."""
    T = int(rng.integers(t_min, t_max + 1))
    N = int(rng.integers(1, n_max + 1))
    return random_profile(rng, T), random_fleet(rng, N, eta, soc)
