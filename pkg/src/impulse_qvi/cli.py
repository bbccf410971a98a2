"""``impulse-qvi`` command line: validate, solve, policy, simulate, compare.

Exit codes: 0 success, 1 domain failure (validation or convergence),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import io
from .errors import (ArtifactError, CFLError, ConfigError, ExprSyntaxError, GridError,
                     ImpulseQVIError, MissingVariableError, NonMonotoneError)
from .grid import GridSpec, interpolate
from .instances import INSTANCES, instance_text
from .montecarlo import RNG_DESCRIPTION, SimConfig, feynman_kac_v0, simulate_paths
from .policy import extract_policy
from .problem import ProblemSpec, load_config, parse_config, validate_problem
from .solver import (SolveConfig, SolveResult, dpp_restart_check, fixed_point_from_above,
                     iterated_optimal_stopping)

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
THREADS_ENV = "IMPULSE_QVI_THREADS"
BUILTIN_PREFIX = "builtin:"

# Errors that mean the inputs themselves are unusable.
_USAGE_ERRORS = (ConfigError, GridError, ExprSyntaxError, MissingVariableError, ArtifactError,
                 CFLError, NonMonotoneError)


class UsageError(Exception):
    pass


# --- argument helpers -------------------------------------------------------

def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_grid_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("grid")
    g.add_argument("--grid-lo", type=_floats, help="lower box corner, comma-separated")
    g.add_argument("--grid-hi", type=_floats, help="upper box corner, comma-separated")
    g.add_argument("--nodes", type=_ints, help="nodes per axis, comma-separated")
    g.add_argument("--time-steps", type=int, help="number of time steps M")


def _add_solve_flags(p: argparse.ArgumentParser) -> None:
    d = SolveConfig()
    g = p.add_argument_group("solver")
    g.add_argument("--theta", type=float, default=d.theta, help="theta-scheme weight (1 = implicit)")
    g.add_argument("--cascade-tol", type=float, default=d.cascade_tol)
    g.add_argument("--cascade-max", type=int, default=d.cascade_max)
    g.add_argument("--mode", choices=("cascade", "above"), default="cascade",
                   help="iterated optimal stopping from V^0, or fixed point iteration from above")


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("simulation")
    g.add_argument("--x0", type=_floats, help="initial state (default: instance start or origin)")
    g.add_argument("--t0", type=float, default=0.0)
    g.add_argument("--paths", type=int, default=10_000)
    g.add_argument("--sim-dt", type=float, help="Euler step (default: grid step / 10)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, help=f"worker threads (fallback: ${THREADS_ENV}, then 1)")
    g.add_argument("--antithetic", action="store_true")
    g.add_argument("--impulse-cap", type=int)
    g.add_argument("--chain", action="store_true",
                   help="allow repeated impulses within one simulation step (up to the cap)")


def _load_problem(source: str) -> tuple[ProblemSpec, str, Optional[str]]:
    """Return (spec, config text, builtin instance name or None)."""
    if source.startswith(BUILTIN_PREFIX):
        name = source[len(BUILTIN_PREFIX):]
        text = instance_text(name)
        return parse_config(text), text, name
    spec = load_config(source)
    return spec, Path(source).read_text(encoding="utf-8"), None


def _grid_from_args(args, spec: ProblemSpec, builtin: Optional[str]) -> GridSpec:
    inst = INSTANCES.get(builtin) if builtin else None
    lo = args.grid_lo if args.grid_lo is not None else (inst.lower if inst else None)
    hi = args.grid_hi if args.grid_hi is not None else (inst.upper if inst else None)
    nodes = args.nodes if args.nodes is not None else (inst.nodes if inst else None)
    steps = args.time_steps if args.time_steps is not None else (inst.time_steps if inst else None)
    missing = [n for n, v in (("--grid-lo", lo), ("--grid-hi", hi), ("--nodes", nodes),
                              ("--time-steps", steps)) if v is None]
    if missing:
        raise UsageError(f"missing grid flags: {', '.join(missing)}")
    dim = spec.dim
    lo, hi, nodes = (_broadcast(v, dim, name) for v, name in ((lo, "--grid-lo"), (hi, "--grid-hi"),
                                                             (nodes, "--nodes")))
    return GridSpec(lo, hi, nodes, steps, spec.horizon)


def _broadcast(v: tuple, dim: int, name: str) -> tuple:
    if len(v) == 1:
        return v * dim
    if len(v) != dim:
        raise UsageError(f"{name} has {len(v)} entries, problem dimension is {dim}")
    return v


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return 1


def _run_dir(path: str) -> tuple[Path, dict, ProblemSpec, GridSpec]:
    d = Path(path)
    manifest = io.read_manifest(d / "manifest.json")
    if manifest.get("command") != "solve":
        raise ArtifactError(f"{d} is not a solve output directory")
    spec = load_config(d / "problem.cfg")
    grid = GridSpec.from_dict(manifest["grid"])
    return d, manifest, spec, grid


def _load_result(path: str) -> tuple[Path, dict, ProblemSpec, SolveResult]:
    d, manifest, spec, grid = _run_dir(path)
    rid, values = io.read_values_csv(d / "values.csv", grid)
    if rid != manifest["run_id"]:
        raise ArtifactError(f"{d / 'values.csv'} belongs to run {rid}, manifest says {manifest['run_id']}")
    solve = manifest["solve"]
    result = SolveResult(grid=grid, values=values, config=SolveConfig(**solve["config"]),
                         n_used=solve["n_used"], converged=solve["converged"],
                         residual_summary=solve["residual_summary"])
    return d, manifest, spec, result


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- commands ---------------------------------------------------------------

def cmd_validate(args) -> int:
    spec, _, builtin = _load_problem(args.config)
    grid = _grid_from_args(args, spec, builtin)
    report = validate_problem(spec, grid, tol=args.tol)
    print(report.summary())
    print("result: " + ("all checks passed" if report.passed else
                        "failed: " + ", ".join(c.name for c in report.checks if not c.passed)))
    return EXIT_OK if report.passed else EXIT_DOMAIN


def cmd_solve(args) -> int:
    spec, text, builtin = _load_problem(args.config)
    grid = _grid_from_args(args, spec, builtin)
    cfg = SolveConfig(theta=args.theta, cascade_tol=args.cascade_tol, cascade_max=args.cascade_max)
    report = validate_problem(spec, grid)
    failed = [c.name for c in report.checks if not c.passed]
    if failed and not args.force:
        print(report.summary(), file=sys.stderr)
        print(f"validation failed ({', '.join(failed)}); use --force to solve anyway", file=sys.stderr)
        return EXIT_DOMAIN
    if args.mode == "above":
        result = fixed_point_from_above(spec, grid, cfg)
    else:
        result = iterated_optimal_stopping(spec, grid, cfg)

    rid = io.run_id({"command": "solve", "problem": spec.digest(), "grid": grid.to_dict(),
                     "solve": cfg.to_dict(), "mode": args.mode})
    out = _out_dir(args)
    (out / "problem.cfg").write_text(spec.to_config())
    io.write_values_csv(out / "values.csv", result, rid)
    io.write_cascade_csv(out / "cascade.csv", result, rid)
    lo, hi = grid.trust_region(spec.impulse_array)
    metrics = {
        "config": cfg.to_dict(),
        "mode": args.mode,
        "n_used": result.n_used,
        "converged": result.converged,
        "increments": result.increments,
        "min_increments": result.min_increments,
        "residual_summary": result.residual_summary,
    }
    if args.dpp_check is not None:
        r = grid.level(args.dpp_check)
        metrics["dpp_restart"] = {"t": float(grid.times[r]), "discrepancy": dpp_restart_check(result, r, spec, grid)}
    io.write_manifest(out / "manifest.json", rid, {
        "command": "solve",
        "problem_path": args.config,
        "config_hash": spec.digest(),
        "grid": grid.to_dict(),
        "solve": metrics,
        "validation": {c.name: c.passed for c in report.checks},
        "forced": bool(failed),
        "trust_region": {"lower": list(lo), "upper": list(hi)},
        "artifacts": ["problem.cfg", "values.csv", "cascade.csv"],
    })
    print(f"run {rid}: cascade iterations {result.n_used}, converged {'yes' if result.converged else 'no'}")
    print(f"residual summary = {result.residual_summary!r}")
    print(f"trust region = [{', '.join(map(repr, lo))}] .. [{', '.join(map(repr, hi))}]")
    if "dpp_restart" in metrics:
        print(f"dpp restart discrepancy = {metrics['dpp_restart']['discrepancy']!r}")
    print(f"wrote {out}")
    if not result.converged:
        print("cascade did not reach the tolerance; artifacts are flagged unconverged", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_policy(args) -> int:
    d, manifest, spec, result = _load_result(args.run)
    policy = extract_policy(result, spec, result.grid, contact_tol=args.contact_tol)
    rid = io.run_id({"command": "policy", "solve": manifest["run_id"], "contact_tol": policy.contact_tol})
    out = Path(args.out) if args.out else d / "policy.csv"
    io.write_policy_csv(out, policy, spec.impulse_array, rid)
    print(f"contact tolerance = {policy.contact_tol!r}")
    print(f"intervention fraction = {policy.intervention_fraction!r}")
    print(f"multiple-maximiser nodes = {int(policy.multiple_maximisers.sum())}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    source = Path(args.source)
    result = None
    if source.is_dir():
        d, manifest, spec, result = _load_result(args.source)
        base = manifest["run_id"]
        grid = result.grid
    elif not args.no_impulses:
        raise UsageError("simulating a policy needs a solve output directory; "
                         "pass --no-impulses to simulate a config without control")
    else:
        spec, _, _ = _load_problem(args.source)
        base, grid = spec.digest(), None
    x0 = args.x0 if args.x0 is not None else (0.0,) * spec.dim
    x0 = _broadcast(x0, spec.dim, "--x0")
    sim_dt = args.sim_dt if args.sim_dt is not None else (grid.dt / 10 if grid else spec.horizon / 1000)
    cfg = SimConfig(x0=x0, t0=args.t0, paths=args.paths, dt=sim_dt, seed=args.seed,
                    impulse_cap=args.impulse_cap, antithetic=args.antithetic, threads=_threads(args),
                    max_impulses_per_step=None if args.chain else 1)
    if args.no_impulses:
        report = feynman_kac_v0(spec, cfg)
        policy_tol = None
    else:
        policy = extract_policy(result, spec, grid, contact_tol=args.contact_tol)
        report = simulate_paths(spec, policy, grid, cfg)
        policy_tol = policy.contact_tol
    sim_desc = {"x0": list(cfg.x0), "t0": cfg.t0, "paths": cfg.paths, "dt": cfg.dt, "seed": cfg.seed,
                "impulse_cap": report.impulse_cap, "antithetic": cfg.antithetic,
                "chain": args.chain, "no_impulses": args.no_impulses, "contact_tol": policy_tol}
    rid = io.run_id({"command": "simulate", "base": base, "sim": sim_desc})
    out = _out_dir(args)
    text = report.summary()
    lines = [f"# run={rid}", text]
    if result is not None:
        t_level = grid.level(cfg.t0)
        v = interpolate(result.values[t_level], grid.clamp(np.asarray(cfg.x0)[None])[0], grid)
        lines.append(f"solver_value = {v!r}")
        lines.append(f"difference = {report.mean - v!r}")
    (out / "sim_report.txt").write_text("\n".join(lines) + "\n")
    io.write_paths_csv(out / "paths.csv", report, rid)
    io.write_manifest(out / "manifest.json", rid, {
        "command": "simulate",
        "source": args.source,
        "config_hash": spec.digest(),
        "sim": sim_desc,
        "rng": {"algorithm": RNG_DESCRIPTION, "seed": cfg.seed},
        "threads": cfg.threads,
        "metrics": {"mean": report.mean, "stderr": report.stderr, "flagged": report.flagged,
                    "mean_impulses": report.mean_impulses, "mean_cost": report.mean_cost},
        "artifacts": ["sim_report.txt", "paths.csv"],
    })
    print("\n".join(lines[1:]))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    da, ma, _, ra = _load_result(args.first)
    db, mb, _, rb = _load_result(args.second)
    if ra.grid != rb.grid:
        raise ArtifactError(f"grids differ: {ma['grid']} vs {mb['grid']}")
    diff = ra.values - rb.values
    sup = float(np.abs(diff).max())
    ordered = bool(diff.max() <= args.tol)
    rid = io.run_id({"command": "compare", "first": ma["run_id"], "second": mb["run_id"]})
    print(f"sup_norm = {sup!r}")
    print(f"max(first - second) = {float(diff.max())!r}")
    print(f"ordered: {'yes' if ordered else 'no'} (first <= second + {args.tol!r})")
    if args.out:
        io.write_diff_csv(Path(args.out), ra.grid, diff, rid)
        print(f"wrote {args.out}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="impulse-qvi",
                                description="Finite-horizon stochastic impulse control solver.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    problem_help = f"problem config file, or {BUILTIN_PREFIX}NAME for a shipped instance"

    v = sub.add_parser("validate", help="check the standing assumptions on the lattice")
    v.add_argument("config", help=problem_help)
    _add_grid_flags(v)
    v.add_argument("--tol", type=float, default=0.0)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="solve the QVI and write value artifacts")
    s.add_argument("config", help=problem_help)
    s.add_argument("--out", required=True, help="output directory")
    _add_grid_flags(s)
    _add_solve_flags(s)
    s.add_argument("--force", action="store_true", help="solve even if validation fails")
    s.add_argument("--dpp-check", type=float, metavar="T",
                   help="also re-solve on [0, T] from the computed V(T) and report the discrepancy")
    s.set_defaults(func=cmd_solve)

    q = sub.add_parser("policy", help="extract the intervention policy from a solve directory")
    q.add_argument("run", help="solve output directory")
    q.add_argument("--contact-tol", type=float)
    q.add_argument("--out", help="policy CSV path (default RUN/policy.csv)")
    q.set_defaults(func=cmd_policy)

    m = sub.add_parser("simulate", help="Monte Carlo estimate of the gain under the extracted policy")
    m.add_argument("source", help="solve output directory (or a problem config with --no-impulses)")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--contact-tol", type=float)
    m.add_argument("--no-impulses", action="store_true", help="uncontrolled (Feynman-Kac) estimate")
    _add_sim_flags(m)
    m.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="nodewise difference of two solve directories")
    c.add_argument("first")
    c.add_argument("second")
    c.add_argument("--tol", type=float, default=1e-8, help="ordering tolerance")
    c.add_argument("--out", help="write the difference field to this CSV")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, *_USAGE_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ImpulseQVIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
