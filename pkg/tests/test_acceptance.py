"""Acceptance criteria, one test each.

Every test records a ``criterion N PASS/FAIL`` line; the lines are repeated in
the terminal summary (``pytest tests/test_acceptance.py -v``).
"""

from __future__ import annotations

import time

import numpy as np
import pytest

import oracles
from impulse_qvi.cli import main
from impulse_qvi.grid import GridSpec, interpolate
from impulse_qvi.instances import INSTANCES, load_instance
from impulse_qvi.montecarlo import SimConfig, feynman_kac_v0, simulate_paths
from impulse_qvi.policy import CONTINUE, extract_policy
from impulse_qvi.problem import parse_config, validate_problem
from impulse_qvi.solver import (SolveConfig, dpp_restart_check, iterated_optimal_stopping, qvi_residuals,
                                solve_v0)

EPS_CASC = SolveConfig().cascade_tol


@pytest.fixture(scope="module")
def solved():
    """Every shipped instance on its recommended lattice."""
    out = {}
    for name in INSTANCES:
        spec, grid = load_instance(name)
        out[name] = (spec, grid, iterated_optimal_stopping(spec, grid))
    return out


def test_criterion_01_cascade_monotonicity(acceptance_line):
    spec, grid = load_instance("hat")
    t0 = time.perf_counter()
    res = iterated_optimal_stopping(spec, grid, keep_levels=True)
    elapsed = time.perf_counter() - t0
    worst = min(float((b - a).min()) for a, b in zip(res.levels, res.levels[1:]))
    first_small = next((k + 1 for k, inc in enumerate(res.increments) if inc < 1e-6), None)
    ok = worst >= -1e-10 and first_small is not None and first_small <= 10 and elapsed < 30
    acceptance_line(1, "cascade monotonicity", ok,
                    f"min nodewise increment {worst:.3e}, increment < 1e-6 at n={first_small}, {elapsed:.2f}s")
    assert ok


def test_criterion_02_boundedness(solved, acceptance_line):
    rows = []
    ok = True
    for name, (spec, grid, res) in solved.items():
        bound = validate_problem(spec, grid).value_bound
        sup = float(np.abs(res.values).max())
        ok &= sup <= bound + 1e-6
        rows.append(f"{name} {sup:.4g}<={bound:.4g}")
    acceptance_line(2, "boundedness", ok, ", ".join(rows))
    assert ok


def test_criterion_03_feynman_kac(acceptance_line):
    spec, grid = load_instance("gaussian")
    assert spec.to_config() == parse_config(
        "dim=1\nhorizon=1\ndrift.0=0\nsigma.0.0=1\nrunning_reward=0\nterminal_reward=x0^2\n"
        "cost=1 + 2 * abs(x0)\nimpulse.0=-0.5\nimpulse.1=0.5\ncost_floor=1").to_config()
    t0 = time.perf_counter()
    v0 = solve_v0(spec, grid)
    value = interpolate(v0.values[0], [0.0], grid)
    mc = feynman_kac_v0(spec, SimConfig(x0=(0.0,), paths=100_000, dt=0.01, seed=20240601))
    elapsed = time.perf_counter() - t0
    exact = oracles.gaussian_second_moment(0.0, 0.0)
    rel = abs(value - exact) / exact
    z = abs(value - mc.mean) / mc.stderr
    ok = rel <= 0.02 and z <= 3 and elapsed < 60
    acceptance_line(3, "Feynman-Kac", ok,
                    f"V0(0,0)={value:.8f} (rel err {rel:.1e}), MC {mc.mean:.5f} +- {mc.stderr:.5f} "
                    f"({z:.2f} se), {elapsed:.2f}s")
    assert ok


def test_criterion_04_exhaustive_dp(acceptance_line):
    spec, grid = load_instance("deterministic")
    assert grid.size <= 9 and grid.time_steps <= 8 and spec.eval_sigma(0.0, grid.points).max() == 0
    t0 = time.perf_counter()
    res = iterated_optimal_stopping(spec, grid)
    pol = extract_policy(res, spec, grid)
    elapsed = time.perf_counter() - t0
    V, act = oracles.frozen_state_dp(grid.axes[0], grid.time_steps, spec.horizon, oracles.deterministic_running,
                                     lambda x: 0.1 * x, lambda t, x, xi: 0.15 + 0.05 * x, [-1, -0.5, 0.5, 1])
    err = float(np.abs(res.values - V).max())
    same = bool(np.array_equal(pol.actions, act))
    ok = err <= 1e-8 and same and elapsed < 1.0
    acceptance_line(4, "exhaustive DP oracle", ok,
                    f"max value error {err:.1e}, policy identical: {same} "
                    f"({int((act != CONTINUE).sum())} impulse labels), {elapsed:.3f}s")
    assert ok


def test_criterion_05_complementarity(solved, acceptance_line):
    rows = []
    ok = True
    for name, (spec, grid, res) in solved.items():
        assert res.converged, name
        summary = qvi_residuals(res, spec, grid).summary
        ok &= summary <= 10 * EPS_CASC and summary == res.residual_summary
        rows.append(f"{name} {summary:.1e}")
    acceptance_line(5, "complementarity", ok, f"bound {10 * EPS_CASC:.0e}: " + ", ".join(rows))
    assert ok


def test_criterion_06_dpp_restart(solved, acceptance_line):
    spec, grid, res = solved["hat"]
    gap = dpp_restart_check(res, grid.time_steps // 2, spec, grid)
    ok = gap <= 5 * EPS_CASC
    acceptance_line(6, "DPP restart", ok, f"midpoint discrepancy {gap:.2e} (bound {5 * EPS_CASC:.0e})")
    assert ok


def test_criterion_07_comparison(solved, acceptance_line):
    spec, grid, res = solved["hat"]
    text = spec.to_config()
    shifted = parse_config(text.replace("running_reward = 0.0", "running_reward = 0.1")
                           .replace("terminal_reward = max0", "terminal_reward = 0.1 + max0"))
    assert shifted != spec
    high = iterated_optimal_stopping(shifted, grid)
    gap = float((res.values - high.values).max())
    ok = gap <= 1e-8
    acceptance_line(7, "comparison ordering", ok, f"max(V1 - V2) = {gap:.3e}")
    assert ok


def _refinement_gap(spec, grid, x0) -> float:
    fine = GridSpec(grid.lower, grid.upper, tuple(2 * n - 1 for n in grid.nodes), 2 * grid.time_steps,
                    grid.horizon)
    coarse = iterated_optimal_stopping(spec, grid)
    refined = iterated_optimal_stopping(spec, fine)
    return abs(interpolate(refined.values[0], x0, fine) - interpolate(coarse.values[0], x0, grid))


def test_criterion_08_no_free_lunch(solved, acceptance_line):
    rows = []
    ok = True
    for name, (spec, grid, res) in solved.items():
        x0 = INSTANCES[name].x0
        pol = extract_policy(res, spec, grid)
        rep = simulate_paths(spec, pol, grid, SimConfig(x0=x0, paths=20_000, dt=grid.dt / 10, seed=2024))
        v = interpolate(res.values[0], x0, grid)
        # scheme tolerance: twice the change under one lattice refinement, plus the cascade tolerance
        tol = 2 * _refinement_gap(spec, grid, x0) + 10 * EPS_CASC
        ok &= rep.mean <= v + 3 * rep.stderr + tol
        rows.append(f"{name} J={rep.mean:.4f}+-{rep.stderr:.4f} V={v:.4f} tol={tol:.1e}")

    spec, grid, res = solved["hat"]
    pol = extract_policy(res, spec, grid)
    for x0 in ((0.0,), (-0.7,), (1.2,)):
        rep = simulate_paths(spec, pol, grid, SimConfig(x0=x0, paths=20_000, dt=grid.dt / 10, seed=7))
        v = interpolate(res.values[0], x0, grid)
        near = abs(rep.mean - v) <= 3 * rep.stderr + 0.02 * abs(v)
        ok &= near
        rows.append(f"hat near-optimal at x0={x0[0]}: J={rep.mean:.4f} V={v:.4f} {'ok' if near else 'far'}")
    acceptance_line(8, "no free lunch", ok, "; ".join(rows))
    assert ok


def test_criterion_09_terminal_condition(solved, acceptance_line):
    ok = True
    for name, (spec, grid, res) in solved.items():
        pol = extract_policy(res, spec, grid)
        ok &= bool(np.array_equal(res.values[-1], spec.eval_terminal(grid.points)))
        ok &= bool(np.all(pol.actions[-1] == CONTINUE))
    acceptance_line(9, "terminal condition", ok, f"V(T)=g exactly and no terminal impulse on {len(solved)} instances")
    assert ok


def test_criterion_10_determinism(tmp_path, acceptance_line, capsys):
    runs = []
    for tag in ("a", "b"):
        d = tmp_path / tag
        assert main(["solve", "builtin:hat", "--force", "--out", str(d / "solve")]) == 0
        assert main(["policy", str(d / "solve")]) == 0
        assert main(["simulate", str(d / "solve"), "--out", str(d / "sim"), "--paths", "5000", "--seed", "42",
                     "--threads", "2" if tag == "b" else "1"]) == 0
        assert main(["compare", str(d / "solve"), str(d / "solve"), "--out", str(d / "diff.csv")]) == 0
        runs.append(d)
    capsys.readouterr()
    files = ["solve/values.csv", "solve/cascade.csv", "solve/policy.csv", "solve/problem.cfg",
             "sim/paths.csv", "sim/sim_report.txt", "diff.csv"]
    same = [f for f in files if (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()]
    ok = len(same) == len(files)
    acceptance_line(10, "determinism", ok, f"{len(same)}/{len(files)} artifacts byte-identical "
                                           "(second run with 2 threads)")
    assert ok
