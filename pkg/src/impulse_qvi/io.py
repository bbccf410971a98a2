"""Artifact files: value, policy, cascade and path CSVs plus the run manifest.

Every CSV starts with a ``# run=<id>`` comment line.  The run id hashes only
deterministic inputs (problem digest, grid, configs), so re-running a command
reproduces every CSV byte for byte; timestamps live in ``manifest.json`` only.
Floats are written with ``repr`` (shortest round-trip form).
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import time
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from . import __version__
from .errors import ArtifactError
from .grid import GridSpec
from .montecarlo import SimReport
from .policy import CONTINUE, Policy
from .solver import SolveResult

__all__ = [
    "BOUNDARY_NOTE", "run_id", "write_values_csv", "read_values_csv", "write_policy_csv",
    "read_policy_csv", "write_cascade_csv", "write_paths_csv", "read_paths_csv",
    "write_diff_csv", "write_manifest", "read_manifest", "fmt",
]

BOUNDARY_NOTE = ("domain truncated to a box with reflecting walls (no diffusion through the wall, "
                 "outward drift dropped); impulse targets clamped to the box; only the trust "
                 "region is considered reliable")


def fmt(v: float) -> str:
    return repr(float(v))


def run_id(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _write(path: Path, rid: str, header: list[str], rows: Iterable[list[str]]) -> None:
    buf = _io.StringIO()
    buf.write(f"# run={rid}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read(path: Path) -> tuple[str | None, list[str], list[list[str]]]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    rid = None
    body = []
    for line in lines:
        if line.startswith("#"):
            if line.startswith("# run="):
                rid = line[len("# run="):].strip()
            continue
        body.append(line)
    rows = list(csv.reader(body))
    if not rows:
        raise ArtifactError(f"{path}: no header row")
    return rid, rows[0], rows[1:]


def _node_columns(grid: GridSpec) -> list[str]:
    return [f"x{i}" for i in range(grid.dim)]


def write_values_csv(path: Path, result: SolveResult, rid: str) -> None:
    """Columns ``t, x0.., value``; time-major, nodes in C order (last axis fastest)."""
    grid = result.grid
    pts = [[fmt(v) for v in p] for p in grid.points]
    rows = ([fmt(t), *pts[i], fmt(result.values[m, i])]
            for m, t in enumerate(grid.times) for i in range(grid.size))
    _write(path, rid, ["t", *_node_columns(grid), "value"], rows)


def read_values_csv(path: Path, grid: GridSpec) -> tuple[str | None, np.ndarray]:
    rid, header, rows = _read(path)
    expected = ["t", *_node_columns(grid), "value"]
    if header != expected:
        raise ArtifactError(f"{path}: header {header} does not match grid (expected {expected})")
    shape = (grid.time_steps + 1, grid.size)
    if len(rows) != shape[0] * shape[1]:
        raise ArtifactError(f"{path}: {len(rows)} rows, grid needs {shape[0] * shape[1]}")
    try:
        data = np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise ArtifactError(f"{path}: {exc}") from exc
    coords = data[:, 1:-1].reshape(shape[0], shape[1], grid.dim)
    if not np.allclose(coords, grid.points[None], rtol=0, atol=1e-12 * (1 + np.abs(grid.points).max())):
        raise ArtifactError(f"{path}: node coordinates do not match the grid")
    return rid, data[:, -1].reshape(shape)


def write_policy_csv(path: Path, policy: Policy, impulses: np.ndarray, rid: str) -> None:
    """Columns ``t, x0.., action, impulse_index, impulse_vector..``."""
    grid = policy.grid
    K = impulses.shape[1]
    pts = [[fmt(v) for v in p] for p in grid.points]
    zero = [fmt(0.0)] * K

    def rows():
        for m, t in enumerate(grid.times):
            for i in range(grid.size):
                a = int(policy.actions[m, i])
                if a == CONTINUE:
                    yield [fmt(t), *pts[i], "continue", "-1", *zero]
                else:
                    yield [fmt(t), *pts[i], "impulse", str(a), *(fmt(v) for v in impulses[a])]

    _write(path, rid, ["t", *_node_columns(grid), "action", "impulse_index",
                       *(f"xi{k}" for k in range(K))], rows())


def read_policy_csv(path: Path, grid: GridSpec) -> np.ndarray:
    _, header, rows = _read(path)
    col = header.index("impulse_index") if "impulse_index" in header else None
    if col is None or len(rows) != (grid.time_steps + 1) * grid.size:
        raise ArtifactError(f"{path}: not a policy file for this grid")
    return np.array([int(r[col]) for r in rows], dtype=np.int64).reshape(grid.time_steps + 1, grid.size)


def write_cascade_csv(path: Path, result: SolveResult, rid: str) -> None:
    rows = ([str(k + 1), fmt(sup), fmt(inf)]
            for k, (sup, inf) in enumerate(zip(result.increments, result.min_increments)))
    _write(path, rid, ["iteration", "sup_increment", "inf_increment"], rows)


def write_diff_csv(path: Path, grid: GridSpec, diff: np.ndarray, rid: str) -> None:
    pts = [[fmt(v) for v in p] for p in grid.points]
    rows = ([fmt(t), *pts[i], fmt(diff[m, i])] for m, t in enumerate(grid.times) for i in range(grid.size))
    _write(path, rid, ["t", *_node_columns(grid), "difference"], rows)


def write_paths_csv(path: Path, report: SimReport, rid: str) -> None:
    rows = ([str(p), fmt(j), str(int(n)), fmt(c)]
            for p, (j, n, c) in enumerate(zip(report.payoffs, report.impulse_counts, report.total_costs)))
    _write(path, rid, ["path", "gain", "impulse_count", "total_cost"], rows)


def read_paths_csv(path: Path) -> dict[str, np.ndarray]:
    _, header, rows = _read(path)
    if header != ["path", "gain", "impulse_count", "total_cost"]:
        raise ArtifactError(f"{path}: not a per-path file")
    arr = np.array([[float(c) for c in r] for r in rows]).reshape(-1, 4)
    return {"gain": arr[:, 1], "impulse_count": arr[:, 2].astype(np.int64), "total_cost": arr[:, 3]}


def write_manifest(path: Path, rid: str, body: dict[str, Any]) -> None:
    doc = {
        "tool": "impulse-qvi",
        "version": __version__,
        "run_id": rid,
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "boundary": BOUNDARY_NOTE,
        **body,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path: Path) -> dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"cannot read manifest {path}: {exc}") from exc
