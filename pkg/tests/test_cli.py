from __future__ import annotations

import json

import numpy as np
import pytest

import oracles
from impulse_qvi import io
from impulse_qvi.cli import EXIT_DOMAIN, EXIT_OK, EXIT_USAGE, THREADS_ENV, main
from impulse_qvi.grid import GridSpec
from impulse_qvi.instances import instance_text

HAT_GRID = ["--grid-lo", "-2", "--grid-hi", "2", "--nodes", "201", "--time-steps", "100"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def hat_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("hat")
    assert main(["solve", "builtin:hat", "--out", str(out), "--force", "--dpp-check", "0.5"]) == EXIT_OK
    return out


def write_cfg(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# --- validate -----------------------------------------------------------------

def test_validate_zero_cost_names_floor(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "free.cfg", instance_text("zero").replace("cost = 0.1", "cost = 0"))
    code, out, _ = run(capsys, "validate", cfg, "--grid-lo=-2", "--grid-hi", "2", "--nodes", "41",
                       "--time-steps", "10")
    assert code == EXIT_DOMAIN
    assert "H3-cost-floor      FAIL" in out


def test_validate_passing_instance(capsys):
    code, out, _ = run(capsys, "validate", "builtin:gaussian")
    assert code == EXIT_OK
    assert "all checks passed" in out


def test_validate_hat_reports_terminal_condition(capsys):
    code, out, _ = run(capsys, "validate", "builtin:hat")
    assert code == EXIT_DOMAIN
    assert "failed: H4-terminal" in out


def test_missing_horizon_is_named(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "nohorizon.cfg", instance_text("hat").replace("horizon = 1\n", ""))
    code, _, err = run(capsys, "validate", cfg, *HAT_GRID)
    assert code == EXIT_USAGE
    assert "'horizon'" in err


def test_file_configs_need_grid_flags(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "hat.cfg", instance_text("hat"))
    code, _, err = run(capsys, "validate", cfg)
    assert code == EXIT_USAGE and "--grid-lo" in err


def test_unknown_builtin(capsys):
    code, _, err = run(capsys, "validate", "builtin:nope")
    assert code == EXIT_USAGE and "unknown instance" in err


def test_argparse_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve"])
    assert exc.value.code == EXIT_USAGE
    capsys.readouterr()


# --- solve ----------------------------------------------------------------------

def test_time_steps_zero_rejected(tmp_path, capsys):
    code, _, err = run(capsys, "solve", "builtin:zero", "--out", str(tmp_path / "o"), "--time-steps", "0")
    assert code == EXIT_USAGE
    assert "time_steps" in err


def test_bad_solver_flag_rejected(tmp_path, capsys):
    code, _, _ = run(capsys, "solve", "builtin:zero", "--out", str(tmp_path / "o"), "--theta", "2")
    assert code == EXIT_USAGE


def test_solve_refuses_failed_validation(tmp_path, capsys):
    code, _, err = run(capsys, "solve", "builtin:hat", "--out", str(tmp_path / "o"))
    assert code == EXIT_DOMAIN and "--force" in err


def test_zero_instance_values(tmp_path, capsys):
    out = tmp_path / "zero"
    code, _, _ = run(capsys, "solve", "builtin:zero", "--out", str(out))
    assert code == EXIT_OK
    manifest = io.read_manifest(out / "manifest.json")
    _, values = io.read_values_csv(out / "values.csv", GridSpec.from_dict(manifest["grid"]))
    assert np.abs(values).max() <= 1e-12


def test_hat_solve_matches_oracle(hat_run):
    manifest = io.read_manifest(hat_run / "manifest.json")
    grid = GridSpec.from_dict(manifest["grid"])
    rid, values = io.read_values_csv(hat_run / "values.csv", grid)
    assert rid == manifest["run_id"]
    V, _ = oracles.qvi_1d(0.5, -2.0, 2.0, 201, 100, 1.0, oracles.hat, [-0.5, 0.5], 0.1)
    assert abs(values[0, 100] - V[0, 100]) <= 1e-6
    solve = manifest["solve"]
    assert solve["converged"] and solve["n_used"] <= 10
    assert solve["dpp_restart"]["discrepancy"] <= 5e-6
    assert manifest["trust_region"] == {"lower": [-1.5], "upper": [1.5]}
    assert manifest["forced"] is True and manifest["validation"]["H4-terminal"] is False
    assert "reflecting" in manifest["boundary"]


def test_cascade_csv(hat_run):
    lines = (hat_run / "cascade.csv").read_text().splitlines()
    assert lines[0].startswith("# run=")
    assert lines[1] == "iteration,sup_increment,inf_increment"
    assert len(lines) - 2 == io.read_manifest(hat_run / "manifest.json")["solve"]["n_used"]


def test_unconverged_exit_and_flag(tmp_path, capsys):
    out = tmp_path / "short"
    code, _, err = run(capsys, "solve", "builtin:hat", "--out", str(out), "--force", "--cascade-max", "2")
    assert code == EXIT_DOMAIN and "unconverged" in err
    assert io.read_manifest(out / "manifest.json")["solve"]["converged"] is False
    assert (out / "values.csv").exists()


def test_solve_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "solve", "builtin:deterministic", "--out", str(tmp_path / d))[0] == EXIT_OK
    for name in ("values.csv", "cascade.csv", "problem.cfg"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_from_above_mode(tmp_path, capsys):
    code, _, _ = run(capsys, "solve", "builtin:deterministic", "--out", str(tmp_path / "up"), "--mode", "above")
    assert code == EXIT_OK
    assert io.read_manifest(tmp_path / "up" / "manifest.json")["solve"]["mode"] == "above"


# --- policy ---------------------------------------------------------------------

def test_policy_csv(hat_run, tmp_path, capsys):
    target = tmp_path / "policy.csv"
    code, out, _ = run(capsys, "policy", str(hat_run), "--out", str(target))
    assert code == EXIT_OK and "contact tolerance" in out
    lines = target.read_text().splitlines()
    assert lines[1] == "t,x0,action,impulse_index,xi0"
    rows = [l.split(",") for l in lines[2:]]
    assert len(rows) == 101 * 201
    impulses = [r for r in rows if r[2] == "impulse"]
    assert impulses and all(r[4] in ("-0.5", "0.5") for r in impulses)
    assert all(r[2] == "continue" for r in rows if r[0] == "1.0")
    grid = GridSpec.from_dict(io.read_manifest(hat_run / "manifest.json")["grid"])
    assert io.read_policy_csv(target, grid).shape == (101, 201)


def test_policy_needs_solve_dir(tmp_path, capsys):
    code, _, err = run(capsys, "policy", str(tmp_path))
    assert code == EXIT_USAGE and "manifest" in err


# --- simulate ---------------------------------------------------------------------

def test_simulate_hat(hat_run, tmp_path, capsys):
    out = tmp_path / "sim"
    code, text, _ = run(capsys, "simulate", str(hat_run), "--out", str(out), "--paths", "4000", "--seed", "3")
    assert code == EXIT_OK
    report = (out / "sim_report.txt").read_text()
    assert "solver_value = 0.8016849" in report and "seed = 3" in report
    paths = io.read_paths_csv(out / "paths.csv")
    assert paths["gain"].size == 4000
    manifest = io.read_manifest(out / "manifest.json")
    assert manifest["rng"]["seed"] == 3 and "Philox" in manifest["rng"]["algorithm"]
    assert manifest["sim"]["dt"] == pytest.approx(0.001)


def test_simulate_threads_env(hat_run, tmp_path, capsys, monkeypatch):
    args = ["simulate", str(hat_run), "--paths", "5000", "--seed", "1"]
    assert run(capsys, *args, "--out", str(tmp_path / "one"))[0] == EXIT_OK
    monkeypatch.setenv(THREADS_ENV, "2")
    assert run(capsys, *args, "--out", str(tmp_path / "two"))[0] == EXIT_OK
    assert io.read_manifest(tmp_path / "two" / "manifest.json")["threads"] == 2
    for name in ("paths.csv", "sim_report.txt"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_simulate_gaussian_without_control(tmp_path, capsys):
    solve_dir = tmp_path / "g"
    assert run(capsys, "solve", "builtin:gaussian", "--out", str(solve_dir))[0] == EXIT_OK
    out = tmp_path / "gsim"
    code, _, _ = run(capsys, "simulate", str(solve_dir), "--out", str(out), "--paths", "20000", "--sim-dt", "0.01")
    assert code == EXIT_OK
    m = io.read_manifest(out / "manifest.json")["metrics"]
    assert m["mean_impulses"] == 0.0
    assert abs(m["mean"] - 1.0) <= 3 * m["stderr"]


def test_simulate_config_needs_no_impulses(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "builtin:gaussian", "--out", str(tmp_path / "x"))
    assert code == EXIT_USAGE and "--no-impulses" in err
    code, out, _ = run(capsys, "simulate", "builtin:gaussian", "--no-impulses", "--out", str(tmp_path / "x"),
                       "--paths", "1000")
    assert code == EXIT_OK and "estimate" in out


# --- compare ----------------------------------------------------------------------

def test_compare_with_itself(hat_run, tmp_path, capsys):
    code, out, _ = run(capsys, "compare", str(hat_run), str(hat_run), "--out", str(tmp_path / "d.csv"))
    assert code == EXIT_OK
    assert "sup_norm = 0.0" in out and "ordered: yes" in out
    assert (tmp_path / "d.csv").read_text().splitlines()[1] == "t,x0,difference"


def test_compare_ordered_pair(tmp_path, capsys):
    text = instance_text("hat")
    low = write_cfg(tmp_path, "low.cfg", text)
    high = write_cfg(tmp_path, "high.cfg", text.replace("running_reward = 0", "running_reward = 0.1")
                     .replace("max0(1 - abs(x0))", "max0(1 - abs(x0)) + 0.1"))
    grid = ["--grid-lo=-2", "--grid-hi=2", "--nodes=101", "--time-steps=50", "--force"]
    assert run(capsys, "solve", low, "--out", str(tmp_path / "lo"), *grid)[0] == EXIT_OK
    assert run(capsys, "solve", high, "--out", str(tmp_path / "hi"), *grid)[0] == EXIT_OK
    assert "ordered: yes" in run(capsys, "compare", str(tmp_path / "lo"), str(tmp_path / "hi"))[1]
    assert "ordered: no" in run(capsys, "compare", str(tmp_path / "hi"), str(tmp_path / "lo"))[1]


def test_compare_mismatched_grids(hat_run, tmp_path, capsys):
    other = tmp_path / "coarse"
    assert run(capsys, "solve", "builtin:hat", "--out", str(other), "--force", "--nodes", "101",
               "--time-steps", "50")[0] == EXIT_OK
    code, _, err = run(capsys, "compare", str(hat_run), str(other))
    assert code == EXIT_USAGE and "grids differ" in err


def test_tampered_values_are_detected(hat_run, tmp_path, capsys):
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(hat_run, copy)
    text = (copy / "values.csv").read_text().splitlines()
    (copy / "values.csv").write_text("\n".join(text[:-5]) + "\n")
    code, _, err = run(capsys, "policy", str(copy))
    assert code == EXIT_USAGE and "rows" in err


def test_manifest_is_json(hat_run):
    doc = json.loads((hat_run / "manifest.json").read_text())
    assert doc["tool"] == "impulse-qvi" and doc["command"] == "solve" and "created" in doc
