import re

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import linprog

from oracles import epigraph_eue
from storage_mri.dispatch import StorageDevice, run_reliability_dispatch
from storage_mri.errors import ValidationError
from storage_mri.lp import (
    LinearProgram, build_model, build_multi, build_single, certify, one_sided_derivative, solve, solve_lp,
    vertex_enumeration, write_lp,
)
from storage_mri.lp.simplex import simplex_solve
from storage_mri.scenario import SurplusProfile
from storage_mri.synthetic import random_instance

STRICT = dict(gap_tol=1e-8, cs_tol=1e-8, primal_tol=1e-9, stat_tol=1e-8)


def test_textbook_one_variable_lp():
    lp = LinearProgram([1.0], sp.csr_matrix((0, 1)), [], [], [0.0], [1.0])
    for backend in ("simplex", "highs"):
        res = solve_lp(lp, backend)
        assert res.x[0] == 0 and np.isclose(res.z_lb[0], 1.0) and res.z_ub[0] == 0


def test_null_storage_pins_soc():
    sol = solve(build_single([-1, 2, -3], StorageDevice("a", 1, 0)))
    assert np.allclose(sol.soc, 0) and np.isclose(sol.V, 0) and np.isclose(sol.eue, 4)


def test_two_hour_single_model_matches_greedy():
    sol = solve(build_single([4, -3], StorageDevice("a", 2, 4)))
    assert np.isclose(sol.eue, 1.0)


def test_efficiency_caps_stored_gain():
    sol = solve(build_single([2, -3], StorageDevice("a", 3, 3, eta=0.5), rte_enabled=True))
    assert np.isclose(sol.soc[0, 0], 1.0) and np.isclose(sol.eue, 2.0)


def test_single_device_multi_model_reduces_to_single(rng):
    for _ in range(20):
        P, fleet = random_instance(rng, n_max=1, eta="random")
        a = solve(build_single(P, fleet[0]), segmented=False)
        b = solve(build_model(P, fleet, aggregate_rows=True), segmented=False)
        assert np.isclose(a.V, b.V, atol=1e-9)
        for param in (("x_bar", 0), ("s_bar", 0), ("perfect",)):
            for side in ("right", "left"):
                assert np.isclose(one_sided_derivative(a, param, side), one_sided_derivative(b, param, side),
                                  atol=1e-7)


def test_aggregate_discharge_bound_binds():
    fleet = [StorageDevice("a", 2, 4, s0=4), StorageDevice("b", 2, 4, s0=4)]
    sol = solve(build_multi([-2], fleet))
    assert np.isclose(-sol.change.sum(), 2.0) and np.isclose(sol.eue, 0)
    assert np.all(sol.multipliers(8) >= 0)


def test_multi_model_matches_independent_lp_and_greedy(rng):
    for _ in range(60):
        P, fleet = random_instance(rng)
        sol = solve(build_multi(P, fleet))
        assert abs(sol.eue - epigraph_eue(P, fleet)) <= 1e-6 * (1 + sol.eue)
        greedy = run_reliability_dispatch(SurplusProfile(0, P), fleet).eue_profile
        assert abs(sol.eue - greedy) <= 1e-6 * (1 + greedy)


@pytest.mark.parametrize("soc_mode", ["fixed_s0", "s0_equals_sbar"])
@pytest.mark.parametrize("eta", [1.0, "random"])
def test_certificates_and_nonnegative_multipliers(rng, soc_mode, eta):
    for backend in ("simplex", "highs"):
        for _ in range(10):
            P, fleet = random_instance(rng, t_max=60, eta=eta)
            sol = solve(build_model(P, fleet, soc_mode), backend=backend, segmented=False)
            assert sol.certificate.ok(**STRICT), sol.certificate
            fams = (1, 2, 3, 4, 5, 6, 7, 8) if len(fleet) > 1 else (1, 2, 3, 4, 5, 6)
            for fam in fams:
                assert np.all(sol.multipliers(fam) >= -1e-9)


def test_greedy_trajectory_is_feasible_in_the_model(rng):
    for _ in range(40):
        P, fleet = random_instance(rng, eta="random")
        model = build_model(P, fleet)
        tr = run_reliability_dispatch(SurplusProfile(0, P), fleet)
        x = np.zeros(model.lp.n)
        N, T = len(fleet), len(P)
        x[:N * T] = tr.soc.ravel()
        prev = np.concatenate([np.array([d.s0 for d in fleet])[:, None], tr.soc[:, :-1]], axis=1)
        x[N * T:2 * N * T] = (tr.soc - prev).ravel()
        if model.g_index is not None:
            sur = np.flatnonzero(np.asarray(P) > 0)
            x[model.g_index] = np.maximum(-tr.power, 0)[:, sur]
        cert = certify(model.lp, x, np.zeros(model.lp.m), np.zeros(model.lp.n), np.zeros(model.lp.n))
        assert cert.primal_residual <= 1e-9


def test_value_invariant_under_permutation(rng):
    for _ in range(15):
        P, fleet = random_instance(rng, t_max=48, eta="random")
        lp = build_model(P, fleet).lp
        pc = rng.permutation(lp.n)
        pr = rng.permutation(lp.m)
        perm = LinearProgram(lp.c[pc], lp.A[pr][:, pc], lp.b[pr], lp.is_eq[pr], lp.lb[pc], lp.ub[pc])
        for backend in ("simplex", "highs"):
            assert abs(solve_lp(perm, backend).objective - solve_lp(lp, backend).objective) <= 1e-10


def test_value_non_increasing_in_ratings(rng):
    for _ in range(20):
        P, fleet = random_instance(rng, eta="random")
        base = solve(build_model(P, fleet)).V
        for i, d in enumerate(fleet):
            bigger = list(fleet)
            bigger[i] = d.replace(x_bar=d.x_bar * 1.3)
            assert solve(build_model(P, bigger)).V <= base + 1e-9
            bigger[i] = d.replace(s_bar=d.s_bar * 1.3)
            assert solve(build_model(P, bigger)).V <= base + 1e-9


def _random_bounded_lp(rng, n, m_eq, m_ub):
    x0 = rng.uniform(0.5, 2, n)
    A_eq = rng.normal(size=(m_eq, n))
    A_ub = rng.normal(size=(m_ub, n))
    A = np.vstack([A_eq, A_ub])
    b = np.concatenate([A_eq @ x0, A_ub @ x0 + rng.uniform(0, 1, m_ub)])
    is_eq = np.arange(m_eq + m_ub) < m_eq
    lb = np.where(rng.random(n) < 0.7, 0.0, -rng.uniform(0, 2, n))
    ub = x0 + rng.uniform(0.5, 3, n)
    return LinearProgram(rng.normal(size=n), sp.csr_matrix(A), b, is_eq, lb, ub)


@pytest.mark.parametrize("shape", [(6, 0, 4), (10, 3, 4), (20, 16, 3), (50, 47, 3)])
def test_solvers_match_vertex_enumeration(rng, shape):
    for _ in range(8):
        lp = _random_bounded_lp(rng, *shape)
        ref, _ = vertex_enumeration(lp)
        for backend in ("simplex", "highs"):
            res = solve_lp(lp, backend)
            assert abs(res.objective - ref) <= 1e-8 * (1 + abs(ref))
            assert res.certificate.ok(**STRICT)


def test_vertex_enumeration_refuses_huge_problems(rng):
    lp = _random_bounded_lp(rng, 40, 0, 5)
    with pytest.raises(ValidationError):
        vertex_enumeration(lp)


def test_simplex_detects_infeasible_and_unbounded():
    res = simplex_solve(np.array([1.0]), np.zeros((0, 1)), np.zeros(0), np.array([[1.0], [-1.0]]),
                        np.array([1.0, -2.0]), np.array([-np.inf]), np.array([np.inf]))
    assert res.status == "infeasible"
    res = simplex_solve(np.array([-1.0]), np.zeros((0, 1)), np.zeros(0), np.zeros((0, 1)), np.zeros(0),
                        np.array([0.0]), np.array([np.inf]))
    assert res.status == "unbounded"


def _lp_value(P, fleet, soc_mode):
    return solve(build_model(P, fleet, soc_mode), segmented=False).V


@pytest.mark.parametrize("soc_mode", ["fixed_s0", "s0_equals_sbar"])
def test_segmented_solve_matches_full_solve(rng, soc_mode):
    used = checked = 0
    h = 1e-5
    for _ in range(40):
        P, fleet = random_instance(rng, t_min=200, t_max=500, eta="random")
        model = build_model(P, fleet, soc_mode)
        full = solve(model, segmented=False)
        seg = solve(model, segmented=True)
        used += bool(seg.segments)
        assert abs(seg.V - full.V) <= 1e-8 * (1 + abs(full.V))
        assert seg.certificate.ok(**STRICT)
        for i, d in enumerate(fleet):
            for param, field in ((("x_bar", i), "x_bar"), (("s_bar", i), "s_bar")):
                up, down = list(fleet), list(fleet)
                up[i] = d.replace(**{field: getattr(d, field) + h})
                if field == "s_bar" and soc_mode == "s0_equals_sbar":
                    up[i] = up[i].replace(s0=up[i].s_bar)
                fd_right = (_lp_value(P, up, soc_mode) - full.V) / h
                assert abs(seg.derivative(param, "right") - fd_right) <= 1e-4 * (1 + abs(fd_right))
                checked += 1
    assert used > 0 and checked > 0


def _parse_lp_file(path):
    """Tiny reader for the LP text dump (the subset it writes)."""
    text = open(path).read().splitlines()
    section, obj, rows, free = None, {}, [], set()
    term = re.compile(r"([+-]) (\S+) (\S+)")
    for line in text:
        s = line.strip()
        if s in ("Minimize", "Subject To", "Bounds", "End") or s.startswith("\\"):
            section = s
            continue
        if section == "Minimize":
            obj = {v: (1 if sg == "+" else -1) * float(c) for sg, c, v in term.findall(s.split(":", 1)[1])}
        elif section == "Subject To":
            name, body = s.split(":", 1)
            lhs, sense, rhs = re.match(r"(.*) (<=|>=|=) (\S+)$", body.strip()).groups()
            coeffs = {v: (1 if sg == "+" else -1) * float(c) for sg, c, v in term.findall(lhs)}
            rows.append((name, coeffs, sense, float(rhs)))
        elif section == "Bounds":
            free.add(s.split()[0])
    return obj, rows, free


def test_lp_dump_round_trips_through_external_solver(tmp_path, rng):
    for soc_mode in ("fixed_s0", "s0_equals_sbar"):
        P, fleet = random_instance(rng, n_max=3, t_max=30, eta="random")
        fleet = fleet if len(fleet) > 1 else fleet + [StorageDevice("extra", 1.0, 2.0, 0.8, 1.0)]
        model = build_model(P, fleet, soc_mode)
        path = tmp_path / f"m_{soc_mode}.lp"
        write_lp(model, path)
        obj, rows, free = _parse_lp_file(path)
        names = sorted({v for _, c, _, _ in rows for v in c} | set(obj))
        idx = {v: j for j, v in enumerate(names)}
        A_ub, b_ub, A_eq, b_eq = [], [], [], []
        for name, coeffs, sense, rhs in rows:
            row = np.zeros(len(names))
            for v, c in coeffs.items():
                row[idx[v]] = c
            if sense == "=":
                A_eq.append(row), b_eq.append(rhs)
            elif sense == "<=":
                A_ub.append(row), b_ub.append(rhs)
            else:
                A_ub.append(-row), b_ub.append(-rhs)
        c = np.array([obj.get(v, 0.0) for v in names])
        bounds = [(None, None) if v in free else (0, None) for v in names]
        res = linprog(c, A_ub=np.array(A_ub), b_ub=b_ub, A_eq=np.array(A_eq), b_eq=b_eq, bounds=bounds,
                      method="highs")
        assert res.status == 0
        assert abs(res.fun - solve(model).V) <= 1e-8
        families = {int(n.split("_")[1]) for n, *_ in rows if n.startswith("lam_")}
        assert {1, 2, 7, 8} <= families
