import csv
import io
import json

import numpy as np
import pytest

from conftest import write_small_system
from storage_mri.cli import EXIT_INPUT, EXIT_OK, EXIT_UNDEFINED, load_config, main
from storage_mri.errors import ValidationError
from storage_mri.io import read_ensemble_cache, write_fleet_csv, write_trace_csv
from storage_mri.scenario import ThermalUnit
from storage_mri.dispatch import StorageDevice


def read_table(path):
    text = "".join(line for line in open(path) if not line.startswith("#"))
    return list(csv.DictReader(io.StringIO(text)))


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture
def minimal(tmp_path):
    write_fleet_csv(tmp_path / "fleet.csv", [ThermalUnit("g", 100, 0.2)], [StorageDevice("b", 10, 20, 0.9, 5)])
    write_trace_csv(tmp_path / "load.csv", 80 + 15 * np.sin(np.arange(24) / 24 * 2 * np.pi))
    return tmp_path / "fleet.csv", tmp_path / "load.csv"


def test_minimal_simulate_is_deterministic(tmp_path, minimal):
    fleet, load = minimal
    for out in ("a", "b"):
        assert run("simulate", "--fleet", fleet, "--load", load, "--n-profiles", 2, "--seed", 3,
                   "--out", tmp_path / out, "--dump-trajectories") == EXIT_OK
    for name in ("metrics.csv", "ensemble.csv", "ensemble.csv.json", "trajectories.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    head = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[:4]
    assert head[0] == "# tool=storage_mri" and head[2] == "# seed=3" and head[3].startswith("# config_digest=")


def test_no_storage_eue_is_mean_deficit(tmp_path, small_system):
    fleet, load = small_system
    assert run("simulate", "--fleet", fleet, "--load", load, "--n-profiles", 6, "--seed", 1, "--no-storage",
               "--out", tmp_path / "o") == EXIT_OK
    ens = read_ensemble_cache(tmp_path / "o" / "ensemble.csv")
    expected = np.mean([p.p_minus.sum() for p in ens.profiles])
    got = float(read_table(tmp_path / "o" / "metrics.csv")[0]["eue_mwh"])
    assert np.isclose(got, expected, rtol=1e-12)


def test_config_file_with_flag_override(tmp_path, minimal):
    fleet, load = minimal
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"fleet": str(fleet), "load": str(load), "n_profiles": 2, "seed": 8,
                               "out": str(tmp_path / "o")}))
    assert run("simulate", "--config", cfg, "--seed", 9) == EXIT_OK
    echoed = json.loads((tmp_path / "o" / "config.json").read_text())
    assert echoed["seed"] == 9 and echoed["n_profiles"] == 2 and echoed["meta"]["version"]
    assert "fleet" in echoed["input_digests"]


def test_input_errors_exit_2(tmp_path, minimal, capsys):
    fleet, load = minimal
    assert run("simulate", "--fleet", tmp_path / "missing.csv", "--load", load, "--out", tmp_path / "o") == EXIT_INPUT
    bad = tmp_path / "bad.csv"
    bad.write_text(fleet.read_text() + "x,thermal,-5,,0.1,,\n")
    assert run("simulate", "--fleet", bad, "--load", load, "--out", tmp_path / "o") == EXIT_INPUT
    assert "bad.csv:4:" in capsys.readouterr().err
    cfg = tmp_path / "c.json"
    cfg.write_text('{"fleet": 1,\n "bogus": 2}')
    assert run("simulate", "--config", cfg) == EXIT_INPUT
    cfg.write_text('{"fleet": ')
    assert run("simulate", "--config", cfg) == EXIT_INPUT
    assert "c.json:1" in capsys.readouterr().err


def test_config_validation():
    with pytest.raises(ValidationError):
        load_config(overrides={"fleet": "f", "load": "l", "n_profiles": 0})
    with pytest.raises(ValidationError):
        load_config(overrides={"fleet": "f", "load": "l", "rule": "simple"})
    with pytest.raises(ValidationError):
        load_config(overrides={"fleet": "f", "load": "l", "qc": "combo", "beta1": 0, "beta2": 0})
    assert load_config(overrides={"fleet": "f", "load": "l"}).n_profiles == 100


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    root = tmp_path_factory.mktemp("study")
    fleet, load = write_small_system(root)
    base = ["--fleet", fleet, "--load", load, "--n-profiles", 12, "--seed", 5, "--aggregate"]
    return root, base


def test_mri_both_methods(study, capsys):
    root, base = study
    out = root / "mri"
    assert run("mri", *base, "--method", "both", "--out", out) == EXIT_OK
    rows = read_table(out / "mri_compare.csv")
    assert {r["device_id"] for r in rows} == {"G1", "G2", "G3", "G4", "perfect"}
    g1 = [r for r in rows if r["device_id"] == "G1" and r["qc_basis"] == "power"][0]
    assert float(g1["dual"]) == 0.0
    for r in rows:
        if r["at_breakpoint"] == "false":
            assert float(r["gap"]) <= 1e-4
    timing = json.loads((out / "run.json").read_text())["timing_s"]
    assert timing["dual_lp_solves"] == 12
    assert timing["perturbation_dispatches_per_profile"] == 2 * 4 * 2 * 3
    assert timing["dual_s"] > 0 and timing["perturbation_s"] > 0
    mri_rows = read_table(out / "mri.csv")
    assert set(mri_rows[0]) == {"device_id", "qc_basis", "mri", "method", "at_breakpoint", "left", "right",
                                "n_profiles", "seed"}


def test_mri_reads_ensemble_cache(study):
    root, base = study
    assert run("simulate", *base, "--out", root / "sim") == EXIT_OK
    assert run("mri", *base, "--out", root / "m1") == EXIT_OK
    assert run("mri", *base, "--ensemble", root / "sim" / "ensemble.csv", "--out", root / "m2") == EXIT_OK
    a = [r["mri"] for r in read_table(root / "m1" / "mri.csv")]
    b = [r["mri"] for r in read_table(root / "m2" / "mri.csv")]
    assert a == b


def test_accredit_reports_and_checks(study, capsys):
    root, base = study
    assert run("accredit", *base, "--out", root / "pw", "--qc", "power", "--compare-dispatch",
               "--alpha-check", 2.0) == EXIT_OK
    printed = capsys.readouterr().out
    assert "alpha-check" in printed and "FAIL" not in printed
    assert run("accredit", *base, "--out", root / "cb", "--qc", "combo", "--beta1", 0.5, "--beta2", 0.5) == EXIT_OK
    power = json.loads((root / "pw" / "report.json").read_text())
    combo = json.loads((root / "cb" / "report.json").read_text())
    g1_power = power["groups"][0]
    g1_combo = combo["groups"][0]
    assert g1_power["id"] == "G1" and g1_power["rmri"] == 0 and g1_combo["rmri"] > 0
    for g in power["groups"]:
        assert np.isclose(g["qmric"], g["qc"] * g["rmri"])
    assert power["metrics"]["input_digests"]["fleet"]
    cmp_ = json.loads((root / "pw" / "dispatch_compare.json").read_text())
    assert cmp_["eue_simple"] >= cmp_["eue_reliability"] - 1e-9
    assert len(read_table(root / "pw" / "dispatch_compare.csv")) == 4
    assert read_table(root / "pw" / "report.csv")[0]["id"] == "G1"


def test_accredit_undefined_exit_4(tmp_path, capsys):
    write_fleet_csv(tmp_path / "f.csv", [ThermalUnit("g", 100, 0.0)], [StorageDevice("b", 50, 500, 1.0, 500)])
    write_trace_csv(tmp_path / "l.csv", [90, 120, 130, 80])
    code = run("accredit", "--fleet", tmp_path / "f.csv", "--load", tmp_path / "l.csv", "--n-profiles", 2,
               "--out", tmp_path / "o")
    assert code == EXIT_UNDEFINED
    assert "system has no marginal shortfall; accreditation undefined" in capsys.readouterr().err


def test_sweep_outputs(study):
    root, base = study
    assert run("sweep", *base, "--out", root / "sw", "--c-grid", "0,20,40,60,120", "--sweep-points", 9,
               "--rmri-icr") == EXIT_OK
    icr = read_table(root / "sw" / "icr_sweep.csv")
    for key in ("eue_mwh", "lole_dpy", "lolh_hpy", "neue_pct"):
        vals = [float(r[key]) for r in icr]
        assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
    sweep = read_table(root / "sw" / "eue_sweep.csv")
    assert len(sweep) == 4 * 2 * 9 and any(r["breakpoint"] == "true" for r in sweep)
    table = read_table(root / "sw" / "rmri_icr.csv")
    g2 = [float(r["rmri"]) for r in table if r["device_id"] == "G2" and r["rmri"] != "nan"]
    assert g2[-1] >= g2[0]
