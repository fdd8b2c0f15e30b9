"""Command-line front end: ``simulate``, ``mri``, ``accredit`` and ``sweep``.

Settings come from an optional JSON config overridden by flags.  The
effective config is echoed to ``config.json`` in the output directory and
its digest, the seed and the tool version head every output file.  Wall
clock times and the worker count go to ``run.json`` only, so every other
output is byte-identical for equal configs.

Exit codes: 0 success, 2 input error, 3 internal invariant violation,
4 accreditation undefined.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .accredit import DIRECTIONS, QC_BASES, QcPolicy, accredit, aggregate_by_duration, verify_qmric_invariance
from .dispatch import RULES, SOC_MODES, run_dispatch
from .errors import AccreditationUndefined, InvariantViolation, SolverError, ValidationError
from .io import (
    config_digest, file_digest, read_ensemble_cache, read_fleet_csv, read_load_csv, write_csv,
    write_ensemble_cache, write_json, write_mri_csv, write_report, write_sweep_csv, write_trajectories,
)
from .metrics import Standards, compute_metrics, ensemble_metrics, icr_sweep
from .mri import (
    BASES, DEFAULT_STEPS, check_sweep, ensemble_sensitivities, eue_sweep, lookup, mri_along,
    mri_from_sensitivities, mri_perturbation, perfect_mri, perfect_mri_dual,
)
from .scenario import generate_ensemble

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT, EXIT_UNDEFINED = 0, 2, 3, 4
METHODS = ("dual", "perturbation", "both")
# Settings that change how a run executes but not what it computes.
EXECUTION_KEYS = ("out", "workers")


@dataclass
class RunConfig:
    fleet: str | None = None
    load: str | None = None
    trace_dir: str | None = None
    ensemble: str | None = None
    out: str = "out"
    n_profiles: int = 100
    T: int | None = None
    seed: int = 0
    rule: str = "reliability"
    priority: list | None = None
    soc_mode: str = "fixed_s0"
    rte_enabled: bool = True
    aggregate: bool = False
    boundaries: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    qc: str = "power"
    beta1: float = 0.5
    beta2: float = 0.5
    direction: str = "beta"
    method: str = "dual"
    steps: list = field(default_factory=lambda: list(DEFAULT_STEPS))
    c_grid: list = field(default_factory=lambda: [0.0, 25.0, 50.0, 75.0, 100.0])
    sweep_points: int = 41
    rmri_icr: bool = False
    lole: float = 0.1
    lolh: float = 2.4
    neue: float = 0.002
    no_storage: bool = False
    dump_trajectories: bool = False
    compare_dispatch: bool = False
    alpha_check: float | None = None
    backend: str = "auto"
    workers: int = 1

    def validate(self) -> "RunConfig":
        if self.ensemble is None and (self.fleet is None or self.load is None):
            raise ValidationError("config needs 'fleet' and 'load' paths (or an 'ensemble' cache)")
        if self.load is None and self.ensemble is not None and self.fleet is None:
            raise ValidationError("config needs a 'fleet' path for the storage devices")
        for name in ("n_profiles", "sweep_points", "workers"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if self.T is not None and (not isinstance(self.T, int) or self.T < 1):
            raise ValidationError(f"T must be a positive integer, got {self.T!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        _choice("rule", self.rule, RULES)
        _choice("soc_mode", self.soc_mode, SOC_MODES)
        _choice("qc", self.qc, QC_BASES)
        _choice("direction", self.direction, DIRECTIONS)
        _choice("method", self.method, METHODS)
        _choice("backend", self.backend, ("auto", "simplex", "highs"))
        if not self.steps or any(not s > 0 for s in self.steps):
            raise ValidationError("steps must be a non-empty list of positive numbers")
        if list(self.c_grid) != sorted(self.c_grid):
            raise ValidationError("c_grid must be ascending")
        if list(self.boundaries) != sorted(self.boundaries):
            raise ValidationError("boundaries must be ascending")
        if self.alpha_check is not None and not self.alpha_check > 0:
            raise ValidationError("alpha_check must be positive")
        if self.rule == "simple" and self.method != "perturbation":
            raise ValidationError("LP duals describe reliability dispatch; use method 'perturbation' with rule 'simple'")
        QcPolicy(self.qc, self.beta1, self.beta2, self.direction)
        return self

    @property
    def policy(self) -> QcPolicy:
        return QcPolicy(self.qc, self.beta1, self.beta2, self.direction)

    @property
    def standards(self) -> Standards:
        return Standards(self.lole, self.lolh, self.neue)

    def recorded(self) -> dict:
        """Settings that determine the outputs."""
        return {k: v for k, v in asdict(self).items() if k not in EXECUTION_KEYS}


def _choice(name, value, options):
    if value not in options:
        raise ValidationError(f"{name} must be one of {options}, got {value!r}")


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then the JSON document at ``path``, then ``overrides``."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ValidationError(f"{path}: cannot read config ({exc.strerror})") from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a JSON object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**data).validate()


class Run:
    """Inputs, output directory and provenance shared by the commands."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.timing = {}
        self.digests = {}
        units, storage, traces, load = [], [], [], None
        if config.fleet is not None:
            T = config.T
            if config.load is not None:
                load = read_load_csv(config.load, T)
                self.digests["load"] = file_digest(config.load)
                T = load.T
            units, storage, traces = read_fleet_csv(config.fleet, config.trace_dir, T)
            self.digests["fleet"] = file_digest(config.fleet)
        if not config.rte_enabled:
            storage = [d.replace(eta=1.0) for d in storage]
        self.members = {d.id: [d.id] for d in storage}
        if config.aggregate and storage:
            storage, self.members = aggregate_by_duration(storage, config.boundaries)
        self.fleet = [] if config.no_storage else list(storage)
        self.units, self.traces, self.load = units, traces, load
        self.digest = config_digest(config.recorded())
        self._ensemble = None

    @property
    def meta(self) -> dict:
        return {"tool": "storage_mri", "version": __version__, "seed": self.config.seed,
                "config_digest": self.digest}

    @property
    def ensemble(self):
        if self._ensemble is None:
            c = self.config
            t0 = time.perf_counter()
            if c.ensemble is not None and Path(c.ensemble).exists():
                self._ensemble = read_ensemble_cache(c.ensemble, self.load)
                self.digests["ensemble"] = file_digest(c.ensemble)
            else:
                if self.load is None:
                    raise ValidationError("generating an ensemble needs a load trace")
                self._ensemble = generate_ensemble(self.units, self.load, c.n_profiles, c.seed, self.traces,
                                                   c.workers)
            self.timing["ensemble_s"] = time.perf_counter() - t0
        return self._ensemble

    def finish(self, command: str) -> None:
        write_json(self.out / "config.json", {**self.config.recorded(), "command": command, "meta": self.meta,
                                              "input_digests": self.digests})
        write_json(self.out / "run.json", {"command": command, "workers": self.config.workers,
                                           "timing_s": self.timing})


def _dispatch_job(args):
    profile, fleet, rule, priority, soc_mode = args
    return run_dispatch(profile, fleet, rule, priority, soc_mode)


def dispatch_all(ensemble, fleet, config: RunConfig) -> list:
    jobs = [(p, fleet, config.rule, config.priority, config.soc_mode) for p in ensemble.profiles]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_dispatch_job, jobs, chunksize=max(1, len(jobs) // (4 * config.workers))))
    return [_dispatch_job(j) for j in jobs]


def _metrics_row(m, standards) -> dict:
    ok = m.passes(standards)
    return {"eue_mwh": m.eue, "lole_dpy": m.lole, "lolh_hpy": m.lolh, "neue_pct": m.neue,
            "n_profiles": m.n_profiles, "T": m.T, "pass_lole": ok["lole"], "pass_lolh": ok["lolh"],
            "pass_neue": ok["neue"]}


METRIC_COLUMNS = ("eue_mwh", "lole_dpy", "lolh_hpy", "neue_pct", "n_profiles", "T", "pass_lole", "pass_lolh",
                  "pass_neue")


def cmd_simulate(config: RunConfig) -> dict:
    """Ensemble cache, metrics summary and optional trajectory dump."""
    run = Run(config)
    ens = run.ensemble
    write_ensemble_cache(ens, run.out / "ensemble.csv", run.meta, run.digests)
    t0 = time.perf_counter()
    trajs = dispatch_all(ens, run.fleet, config)
    run.timing["dispatch_s"] = time.perf_counter() - t0
    load = ens.load if ens.load is not None else run.load
    if load is None:
        raise ValidationError("metrics need a load trace")
    m = compute_metrics(trajs, load)
    write_csv(run.out / "metrics.csv", METRIC_COLUMNS, [_metrics_row(m, config.standards)], run.meta)
    if config.dump_trajectories:
        write_trajectories(trajs, run.out / "trajectories.csv", run.meta)
    run.finish("simulate")
    print(f"EUE {m.eue:.6g} MWh, LOLE {m.lole:.6g} d, LOLH {m.lolh:.6g} h, NEUE {m.neue:.6g} %")
    return {"metrics": m}


def _dual_results(run, ensemble):
    c = run.config
    sens = ensemble_sensitivities(ensemble, run.fleet, c.soc_mode, c.backend, "auto", c.workers)
    return mri_from_sensitivities(sens, run.fleet, ensemble.seed), perfect_mri_dual(sens, ensemble.seed)


def _perturbation_results(run, ensemble, rule=None):
    c = run.config
    rule = rule or c.rule
    results = [mri_perturbation(ensemble, run.fleet, (d.id, b), c.steps, rule, c.priority, c.soc_mode)
               for d in run.fleet for b in BASES]
    return results, perfect_mri(ensemble, run.fleet, c.steps, rule, c.priority, c.soc_mode)


def _warn_breakpoints(results) -> None:
    for r in results:
        if r.at_breakpoint:
            print(f"warning: {r.device_id}/{r.basis} sits at a breakpoint; left {r.left:.6g}, right {r.right:.6g}",
                  file=sys.stderr)


def _rel_gap(a, b) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


COMPARE_COLUMNS = ("device_id", "qc_basis", "dual", "perturbation", "gap", "at_breakpoint")


def cmd_mri(config: RunConfig) -> dict:
    """MRI table; ``method='both'`` adds a dual-vs-perturbation comparison."""
    run = Run(config)
    if not run.fleet:
        raise ValidationError("MRI needs at least one storage device")
    ens = run.ensemble
    rows, out = [], {}
    if config.method in ("dual", "both"):
        t0 = time.perf_counter()
        dual, dual_perfect = _dual_results(run, ens)
        run.timing["dual_s"] = time.perf_counter() - t0
        run.timing["dual_lp_solves"] = ens.n_profiles
        rows += dual + [dual_perfect]
        out["dual"] = dual + [dual_perfect]
        _warn_breakpoints(dual)
    if config.method in ("perturbation", "both"):
        t0 = time.perf_counter()
        pert, pert_perfect = _perturbation_results(run, ens)
        run.timing["perturbation_s"] = time.perf_counter() - t0
        run.timing["perturbation_dispatches_per_profile"] = 2 * len(run.fleet) * len(BASES) * len(config.steps)
        rows += pert + [pert_perfect]
        out["perturbation"] = pert + [pert_perfect]
    write_mri_csv(rows, run.out / "mri.csv", run.meta)
    if config.method == "both":
        cmp_rows = []
        for d in out["dual"]:
            p = lookup(out["perturbation"], d.device_id, d.basis)
            cmp_rows.append({"device_id": d.device_id, "qc_basis": d.basis, "dual": d.mri, "perturbation": p.mri,
                             "gap": _rel_gap(d.mri, p.mri), "at_breakpoint": d.at_breakpoint or p.at_breakpoint})
        write_csv(run.out / "mri_compare.csv", COMPARE_COLUMNS, cmp_rows, run.meta)
        out["compare"] = cmp_rows
        if "dual_s" in run.timing:
            print(f"dual pass {run.timing['dual_s']:.3f} s ({ens.n_profiles} LP solves), "
                  f"perturbation pass {run.timing['perturbation_s']:.3f} s")
    run.finish("mri")
    return out


def _accredit_with(run, ensemble, rule, method):
    c = run.config
    if method == "perturbation":
        results, perfect = _perturbation_results(run, ensemble, rule)
    else:
        results, perfect = _dual_results(run, ensemble)
    _warn_breakpoints(results)
    m = ensemble_metrics(ensemble, run.fleet, rule, c.priority, c.soc_mode, ensemble.load or run.load)
    metrics = {**m.as_dict(), "input_digests": dict(run.digests)}
    return accredit(run.fleet, results, perfect, c.policy, rule, ensemble.seed, metrics)


ALPHA_COLUMNS = ("device_id", "alpha", "qmric", "qmric_scaled", "gap", "status")
DISPATCH_COMPARE_COLUMNS = ("id", "rmri_reliability", "rmri_simple", "delta_rmri", "qmric_reliability",
                            "qmric_simple")


def cmd_accredit(config: RunConfig) -> dict:
    """Accreditation report, with optional dispatch comparison and QC-scaling check."""
    run = Run(config)
    if not run.fleet:
        raise ValidationError("accreditation needs at least one storage device")
    ens = run.ensemble
    method = "perturbation" if config.method == "perturbation" else "dual"
    t0 = time.perf_counter()
    report = _accredit_with(run, ens, config.rule, method)
    run.timing["accredit_s"] = time.perf_counter() - t0
    write_report(report, run.out / "report.json", run.out / "report.csv", run.meta)
    out = {"report": report}
    for r in report.rows:
        print(f"{r.id}: qc {r.qc:.6g}, mri {r.mri:.6g}, rmri {r.rmri:.6g}, qmric {r.qmric:.6g}")
    if config.compare_dispatch:
        other = "simple" if config.rule == "reliability" else "reliability"
        rep_other = _accredit_with(run, ens, other, "perturbation" if other == "simple" else method)
        rel, sim = (report, rep_other) if config.rule == "reliability" else (rep_other, report)
        write_report(rep_other, run.out / f"report_{other}.json", run.out / f"report_{other}.csv", run.meta)
        rows = [{"id": a.id, "rmri_reliability": a.rmri, "rmri_simple": b.rmri, "delta_rmri": b.rmri - a.rmri,
                 "qmric_reliability": a.qmric, "qmric_simple": b.qmric} for a, b in zip(rel.rows, sim.rows)]
        write_csv(run.out / "dispatch_compare.csv", DISPATCH_COMPARE_COLUMNS, rows, run.meta)
        summary = {"eue_reliability": rel.metrics["eue"], "eue_simple": sim.metrics["eue"],
                   "delta_eue": sim.metrics["eue"] - rel.metrics["eue"],
                   "perfect_mri_reliability": rel.perfect_mri, "perfect_mri_simple": sim.perfect_mri,
                   "meta": run.meta}
        write_json(run.out / "dispatch_compare.json", summary)
        print(f"EUE reliability {summary['eue_reliability']:.6g}, simple {summary['eue_simple']:.6g}, "
              f"delta {summary['delta_eue']:.6g}")
        out["compare"] = summary
    if config.alpha_check is not None:
        rows = []
        for dev, r in zip(run.fleet, report.rows):
            if r.at_breakpoint:
                rows.append({"device_id": dev.id, "alpha": config.alpha_check, "qmric": r.qmric,
                             "qmric_scaled": math.nan, "gap": math.nan, "status": "skipped_breakpoint"})
                print(f"alpha-check {dev.id}: skipped, rating sits at an EUE breakpoint")
                continue

            def mri_fn(dx, ds, dev=dev):
                return mri_along(ens, run.fleet, dev.id, (dx, ds), config.steps, config.rule, config.priority,
                                 config.soc_mode).mri

            ok, gap, q1, q2 = verify_qmric_invariance(dev, mri_fn, config.alpha_check, report.perfect_mri,
                                                      config.policy, tol=1e-6)
            rows.append({"device_id": dev.id, "alpha": config.alpha_check, "qmric": q1, "qmric_scaled": q2,
                         "gap": gap, "status": "pass" if ok else "fail"})
            print(f"alpha-check {dev.id} alpha={config.alpha_check:g}: {'pass' if ok else 'FAIL'} gap {gap:.3g}")
        write_csv(run.out / "alpha_check.csv", ALPHA_COLUMNS, rows, run.meta)
        out["alpha_check"] = rows
        if any(r["status"] == "fail" for r in rows):
            run.finish("accredit")
            raise InvariantViolation("accredited capacity changed under QC rescaling")
    run.finish("accredit")
    return out


EUE_SWEEP_COLUMNS = ("device_id", "basis", "value", "eue_mwh", "breakpoint")
RMRI_ICR_COLUMNS = ("c_mw", "device_id", "rmri", "perfect_mri")


def cmd_sweep(config: RunConfig) -> dict:
    """ICR metric sweep, storage-rating EUE sweeps and optional rMRI-vs-ICR table."""
    run = Run(config)
    ens = run.ensemble
    c = config
    t0 = time.perf_counter()
    icr = icr_sweep(ens, run.fleet, c.c_grid, c.standards, c.rule, c.priority, c.soc_mode)
    write_sweep_csv(icr, run.out / "icr_sweep.csv", run.meta)
    rows = []
    for dev in run.fleet:
        for basis in BASES:
            rating = dev.x_bar if basis == "power" else dev.s_bar
            grid = rating * np.linspace(0.05, 2.0, c.sweep_points)
            pairs = eue_sweep(ens, run.fleet, (dev.id, basis), grid, c.rule, c.priority, c.soc_mode)
            bps = set(check_sweep(pairs, lipschitz=math.inf).breakpoints)
            rows += [{"device_id": dev.id, "basis": basis, "value": v, "eue_mwh": e, "breakpoint": v in bps}
                     for v, e in pairs]
    write_csv(run.out / "eue_sweep.csv", EUE_SWEEP_COLUMNS, rows, run.meta)
    out = {"icr": icr, "eue_sweep": rows}
    if c.rmri_icr and run.fleet:
        table = []
        for cap in c.c_grid:
            shifted = ens.shifted(cap)
            if c.method == "perturbation":
                results, perfect = _perturbation_results(run, shifted)
            else:
                results, perfect = _dual_results(run, shifted)
            try:
                rep = accredit(run.fleet, results, perfect, c.policy, c.rule, ens.seed)
                table += [{"c_mw": cap, "device_id": r.id, "rmri": r.rmri, "perfect_mri": rep.perfect_mri}
                          for r in rep.rows]
            except AccreditationUndefined:
                table += [{"c_mw": cap, "device_id": d.id, "rmri": math.nan, "perfect_mri": 0.0} for d in run.fleet]
        write_csv(run.out / "rmri_icr.csv", RMRI_ICR_COLUMNS, table, run.meta)
        out["rmri_icr"] = table
    run.timing["sweep_s"] = time.perf_counter() - t0
    run.finish("sweep")
    for key, cap in icr.crossing.items():
        print(f"{key.upper()} standard met from c = {cap} MW" if cap is not None else f"{key.upper()} standard not met")
    return out


COMMANDS = {"simulate": cmd_simulate, "mri": cmd_mri, "accredit": cmd_accredit, "sweep": cmd_sweep}


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON config document; flags override its keys")
    common.add_argument("--fleet", help="fleet CSV (id,type,capacity_mw,energy_mwh,efor,rte,initial_soc_mwh)")
    common.add_argument("--load", help="load CSV (hour,mw)")
    common.add_argument("--trace-dir", dest="trace_dir", help="directory of <id>.csv traces for trace rows")
    common.add_argument("--ensemble", help="ensemble cache to read instead of sampling")
    common.add_argument("--out", help="output directory")
    common.add_argument("--n-profiles", dest="n_profiles", type=int)
    common.add_argument("--T", dest="T", type=int, help="horizon in hours (default: load length)")
    common.add_argument("--seed", type=int)
    common.add_argument("--rule", choices=RULES)
    common.add_argument("--priority", type=_names, help="comma-separated device ids for simple dispatch")
    common.add_argument("--soc-mode", dest="soc_mode", choices=SOC_MODES)
    common.add_argument("--no-rte", dest="rte_enabled", action="store_false", help="treat every device as lossless")
    common.add_argument("--aggregate", action="store_true", help="merge storage into duration groups")
    common.add_argument("--boundaries", type=_floats, help="duration group boundaries in hours")
    common.add_argument("--qc", choices=QC_BASES)
    common.add_argument("--beta1", type=float)
    common.add_argument("--beta2", type=float)
    common.add_argument("--direction", choices=DIRECTIONS, help="combo rating direction")
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--steps", type=_floats, help="perturbation step ladder")
    common.add_argument("--c-grid", dest="c_grid", type=_floats, help="perfect capacity grid in MW")
    common.add_argument("--sweep-points", dest="sweep_points", type=int)
    common.add_argument("--rmri-icr", dest="rmri_icr", action="store_true")
    common.add_argument("--lole", type=float)
    common.add_argument("--lolh", type=float)
    common.add_argument("--neue", type=float)
    common.add_argument("--no-storage", dest="no_storage", action="store_true")
    common.add_argument("--dump-trajectories", dest="dump_trajectories", action="store_true")
    common.add_argument("--compare-dispatch", dest="compare_dispatch", action="store_true")
    common.add_argument("--alpha-check", dest="alpha_check", type=float)
    common.add_argument("--backend", choices=("auto", "simplex", "highs"))
    common.add_argument("--workers", type=int)
    parser = argparse.ArgumentParser(prog="storage-mri", description="Storage accreditation by marginal "
                                     "reliability impact.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__.splitlines()[0].replace("``", ""))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    try:
        config = load_config(config_path, args)
    except (ValidationError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        COMMANDS[command](config)
    except AccreditationUndefined as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except (InvariantViolation, SolverError) as exc:
        print(f"error: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
