"""CSV/JSON readers and writers with line-level diagnostics and digests.

Every CSV written here starts with ``#`` comment lines carrying the
provenance fields passed in ``meta`` (config digest, seed, tool version);
readers skip them.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
from pathlib import Path

import numpy as np

from .dispatch import StorageDevice
from .errors import ValidationError
from .scenario import LoadTrace, MonteCarloEnsemble, SurplusProfile, ThermalUnit

FLEET_COLUMNS = ("id", "type", "capacity_mw", "energy_mwh", "efor", "rte", "initial_soc_mwh")
UNIT_TYPES = ("thermal", "storage", "trace")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_digest(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def config_digest(config: dict) -> str:
    return sha256_bytes(canonical_json(config).encode())


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def fmt(x) -> str:
    """Round-trip float formatting, stable across runs."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if x == 0.0:
            return "0"
        return repr(x)
    return "" if x is None else str(x)


def _rows(path):
    """``(line number, row dict)`` pairs of a CSV file, skipping comments."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read ({exc.strerror})") from None
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines()) if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValidationError(f"{path}: empty file")
    reader = csv.reader([ln for _, ln in lines])
    header = [h.strip() for h in next(reader)]
    out = []
    for (lineno, _), row in zip(lines[1:], reader):
        if len(row) != len(header):
            raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        out.append((lineno, dict(zip(header, (v.strip() for v in row)))))
    return header, out


def _float(value, path, lineno, column, default=None):
    if value == "" and default is not None:
        return default
    try:
        v = float(value)
    except ValueError:
        raise ValidationError(f"{path}:{lineno}: column {column!r} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"{path}:{lineno}: column {column!r} must be finite")
    return v


def read_trace_csv(path, T: int | None = None) -> np.ndarray:
    """Hourly ``hour,mw`` series with hours 1..T in order."""
    header, rows = _rows(path)
    if header != ["hour", "mw"]:
        raise ValidationError(f"{path}:1: header must be 'hour,mw', got {','.join(header)!r}")
    values = []
    for j, (lineno, row) in enumerate(rows):
        try:
            hour = int(row["hour"])
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: hour is not an integer: {row['hour']!r}") from None
        if hour != j + 1:
            raise ValidationError(f"{path}:{lineno}: expected hour {j + 1}, got {hour}")
        values.append(_float(row["mw"], path, lineno, "mw"))
    if T is not None and len(values) != T:
        raise ValidationError(f"{path}: expected exactly {T} rows, got {len(values)}")
    return np.array(values)


def read_fleet_csv(path, trace_dir=None, T: int | None = None):
    """``(thermal units, storage devices, renewable traces)`` from a fleet file.

    Trace rows name a file ``<trace_dir>/<id>.csv``.  Blank ``rte`` means 1
    and blank ``initial_soc_mwh`` means an empty device.
    """
    header, rows = _rows(path)
    if tuple(header) != FLEET_COLUMNS:
        raise ValidationError(f"{path}:1: header must be {','.join(FLEET_COLUMNS)!r}")
    units, storage, traces = [], [], []
    seen = set()
    for lineno, row in rows:
        uid = row["id"]
        if not uid:
            raise ValidationError(f"{path}:{lineno}: empty id")
        if uid in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate id {uid!r}")
        seen.add(uid)
        kind = row["type"]
        try:
            if kind == "thermal":
                units.append(ThermalUnit(uid, _float(row["capacity_mw"], path, lineno, "capacity_mw"),
                                         _float(row["efor"], path, lineno, "efor", 0.0)))
            elif kind == "storage":
                storage.append(StorageDevice(
                    uid,
                    _float(row["capacity_mw"], path, lineno, "capacity_mw"),
                    _float(row["energy_mwh"], path, lineno, "energy_mwh"),
                    _float(row["rte"], path, lineno, "rte", 1.0),
                    _float(row["initial_soc_mwh"], path, lineno, "initial_soc_mwh", 0.0),
                ))
            elif kind == "trace":
                if trace_dir is None:
                    raise ValidationError(f"{path}:{lineno}: trace row {uid!r} needs a trace directory")
                traces.append(read_trace_csv(Path(trace_dir) / f"{uid}.csv", T))
            else:
                raise ValidationError(f"{path}:{lineno}: type must be one of {UNIT_TYPES}, got {kind!r}")
        except ValidationError as exc:
            msg = str(exc)
            if not msg.startswith(str(path)):
                msg = f"{path}:{lineno}: {msg}"
            raise ValidationError(msg) from None
    return units, storage, traces


def read_load_csv(path, T: int | None = None) -> LoadTrace:
    values = read_trace_csv(path)
    if T is not None:
        if values.size < T:
            raise ValidationError(f"{path}: load has {values.size} hours, fewer than T={T}")
        values = values[:T]
    try:
        return LoadTrace(values, Path(path).stem)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _header_lines(meta) -> str:
    if not meta:
        return ""
    return "".join(f"# {k}={fmt(v)}\n" for k, v in meta.items())


def write_csv(path, columns, rows, meta=None) -> None:
    buf = _io.StringIO()
    buf.write(_header_lines(meta))
    buf.write(",".join(columns) + "\n")
    for r in rows:
        buf.write(",".join(fmt(r[c]) for c in columns) + "\n")
    Path(path).write_text(buf.getvalue())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2, default=_json_default) + "\n")


def write_ensemble_cache(ensemble: MonteCarloEnsemble, path, meta=None, digests=None) -> None:
    """``k,hour,p_mw`` rows plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    P = ensemble.matrix()
    Np, T = P.shape
    buf = _io.StringIO()
    buf.write(_header_lines(meta))
    buf.write("k,hour,p_mw\n")
    hours = [str(h) for h in range(1, T + 1)]
    for k in range(Np):
        ks = str(ensemble.profiles[k].k)
        buf.write("".join(f"{ks},{h},{fmt(v)}\n" for h, v in zip(hours, P[k].tolist())))
    data = buf.getvalue().encode()
    path.write_bytes(data)
    side = {"seed": ensemble.seed, "T": T, "N_p": Np, "digests": dict(digests or {}),
            "cache_sha256": sha256_bytes(data)}
    if meta:
        side.update({k: v for k, v in meta.items() if k not in side})
    write_json(str(path) + ".json", side)


def read_ensemble_cache(path, load: LoadTrace | None = None) -> MonteCarloEnsemble:
    path = Path(path)
    side_path = Path(str(path) + ".json")
    try:
        side = json.loads(side_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{side_path}: cannot read ensemble sidecar ({exc})") from None
    if file_digest(path) != side.get("cache_sha256"):
        raise ValidationError(f"{path}: contents do not match the sidecar digest")
    header, rows = _rows(path)
    if header != ["k", "hour", "p_mw"]:
        raise ValidationError(f"{path}:1: header must be 'k,hour,p_mw'")
    T, Np = int(side["T"]), int(side["N_p"])
    if len(rows) != T * Np:
        raise ValidationError(f"{path}: expected {T * Np} rows, got {len(rows)}")
    P = np.empty((Np, T))
    ks = []
    for j, (lineno, row) in enumerate(rows):
        k_idx, t = divmod(j, T)
        if int(row["hour"]) != t + 1:
            raise ValidationError(f"{path}:{lineno}: expected hour {t + 1}")
        if t == 0:
            ks.append(int(row["k"]))
        P[k_idx, t] = _float(row["p_mw"], path, lineno, "p_mw")
    profiles = tuple(SurplusProfile(k, P[j]) for j, k in enumerate(ks))
    return MonteCarloEnsemble(profiles, int(side["seed"]), load)


TRAJECTORY_COLUMNS = ("k", "hour", "device_id", "soc_mwh", "power_mw", "unserved_mwh")


def write_trajectories(trajectories, path, meta=None) -> None:
    """One row per profile, hour and device; unserved energy repeats per device."""
    buf = _io.StringIO()
    buf.write(_header_lines(meta))
    buf.write(",".join(TRAJECTORY_COLUMNS) + "\n")
    for tr in trajectories:
        soc = tr.soc.tolist()
        pw = tr.power.tolist()
        uns = tr.unserved.tolist()
        for t in range(tr.T):
            for i, dev in enumerate(tr.device_ids):
                buf.write(f"{tr.k},{t + 1},{dev},{fmt(soc[i][t])},{fmt(pw[i][t])},{fmt(uns[t])}\n")
            if not tr.device_ids:
                buf.write(f"{tr.k},{t + 1},,0,0,{fmt(uns[t])}\n")
    Path(path).write_text(buf.getvalue())


MRI_COLUMNS = ("device_id", "qc_basis", "mri", "method", "at_breakpoint", "left", "right", "n_profiles", "seed")


def write_mri_csv(results, path, meta=None) -> None:
    write_csv(path, MRI_COLUMNS, [r.row() for r in results], meta)


SWEEP_COLUMNS = ("c_mw", "eue_mwh", "lole_dpy", "lolh_hpy", "neue_pct", "pass_lole", "pass_lolh", "pass_neue")


def write_sweep_csv(sweep, path, meta=None) -> None:
    write_csv(path, SWEEP_COLUMNS, sweep.table(), meta)


REPORT_COLUMNS = ("id", "x_bar", "s_bar", "duration", "qc", "mri_power", "mri_energy", "mri", "rmri", "qmric",
                  "at_breakpoint")


def write_report(report, json_path, csv_path, meta=None) -> None:
    doc = report.as_dict()
    if meta:
        doc["meta"] = dict(meta)
    write_json(json_path, doc)
    from dataclasses import asdict

    write_csv(csv_path, REPORT_COLUMNS, [asdict(r) for r in report.rows], meta)


def write_fleet_csv(path, units=(), storage=()) -> None:
    """Fleet file in the schema read by :func:`read_fleet_csv`."""
    rows = [{"id": u.id, "type": "thermal", "capacity_mw": u.capacity, "energy_mwh": None, "efor": u.efor,
             "rte": None, "initial_soc_mwh": None} for u in units]
    rows += [{"id": d.id, "type": "storage", "capacity_mw": d.x_bar, "energy_mwh": d.s_bar, "efor": None,
              "rte": d.eta, "initial_soc_mwh": d.s0} for d in storage]
    write_csv(path, FLEET_COLUMNS, rows)


def write_trace_csv(path, values) -> None:
    write_csv(path, ("hour", "mw"), [{"hour": t + 1, "mw": float(v)} for t, v in enumerate(values)])
