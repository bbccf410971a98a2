"""Truncated space-time lattice and the discrete local/nonlocal operators.

The spatial box uses reflecting walls: second differences across a wall
mirror the ghost node onto the first interior node, and a drift pointing out
of the box is dropped at the wall node.  Impulse targets leaving the box are
clamped onto its surface before interpolation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import TYPE_CHECKING, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GridError, NonMonotoneError
from .expr import variables

if TYPE_CHECKING:
    from .problem import ProblemSpec

__all__ = [
    "GridSpec",
    "ValueField",
    "DiscreteGenerator",
    "Discretization",
    "interpolate",
    "interpolation_matrix",
    "build_generator",
    "intervention_operator",
]

# Off-diagonal weights this negative (relative to the row scale) are rounding noise.
_MONOTONE_SLACK = 1e-12


@dataclass(frozen=True)
class GridSpec:
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    nodes: tuple[int, ...]
    time_steps: int
    horizon: float

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        object.__setattr__(self, "nodes", tuple(int(v) for v in self.nodes))
        if not (len(self.lower) == len(self.upper) == len(self.nodes)) or not self.nodes:
            raise GridError("lower, upper and nodes must have the same positive length")
        for lo, hi in zip(self.lower, self.upper):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise GridError(f"need finite lower < upper on every axis, got [{lo}, {hi}]")
        if any(n < 3 for n in self.nodes):
            raise GridError("at least 3 nodes per axis are required")
        if int(self.time_steps) != self.time_steps or self.time_steps < 1:
            raise GridError("time_steps must be a positive integer")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise GridError("horizon must be a finite positive number")

    @classmethod
    def uniform(cls, lower: float, upper: float, nodes: int, time_steps: int, horizon: float,
                dim: int = 1) -> "GridSpec":
        return cls((lower,) * dim, (upper,) * dim, (nodes,) * dim, time_steps, horizon)

    @property
    def dim(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lower, self.upper, self.nodes))

    @property
    def dt(self) -> float:
        return self.horizon / self.time_steps

    @cached_property
    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.nodes)]

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape (size, dim), lexicographic order (last axis fastest)."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.time_steps + 1)

    def level(self, t: float) -> int:
        """Index of the time level at ``t``; ``t`` must sit on the lattice."""
        m = int(round(t / self.dt))
        if not 0 <= m <= self.time_steps or abs(m * self.dt - t) > 1e-9 * max(1.0, self.horizon):
            raise GridError(f"t={t} is not a time level of this grid")
        return m

    def clamp(self, pts: np.ndarray) -> np.ndarray:
        return np.clip(pts, self.lower, self.upper)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.all((pts >= np.array(self.lower)) & (pts <= np.array(self.upper)), axis=1)

    def trust_region(self, impulses: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
        """Box shrunk on each axis by the largest impulse component on that axis."""
        radius = np.max(np.abs(np.atleast_2d(impulses)), axis=0)
        lo = tuple(float(v) for v in np.array(self.lower) + radius)
        hi = tuple(float(v) for v in np.array(self.upper) - radius)
        return lo, hi

    def trust_mask(self, impulses: np.ndarray, interior: bool = True) -> np.ndarray:
        lo, hi = self.trust_region(impulses)
        pts = self.points
        mask = np.all((pts >= np.array(lo) - 1e-12) & (pts <= np.array(hi) + 1e-12), axis=1)
        if interior:
            mask &= self.interior_mask
        return mask

    @cached_property
    def interior_mask(self) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.dim, -1)
        n = np.array(self.nodes)[:, None]
        return np.all((idx > 0) & (idx < n - 1), axis=0)

    def nearest_node(self, pts: np.ndarray) -> np.ndarray:
        """Flat index of the nearest node to each point (points outside are clamped first)."""
        pts = np.atleast_2d(pts)
        lo = np.array(self.lower)
        h = np.array(self.spacing)
        idx = np.rint((self.clamp(pts) - lo) / h).astype(np.int64)
        idx = np.clip(idx, 0, np.array(self.nodes) - 1)
        return np.ravel_multi_index(tuple(idx.T), self.shape)

    def to_dict(self) -> dict:
        return {
            "lower": list(self.lower),
            "upper": list(self.upper),
            "nodes": list(self.nodes),
            "time_steps": self.time_steps,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["lower"]), tuple(d["upper"]), tuple(d["nodes"]), int(d["time_steps"]),
                   float(d["horizon"]))


@dataclass
class ValueField:
    """Values on every spatial node at time level ``m``."""

    m: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)


# --- interpolation ----------------------------------------------------------


def _interp_stencil(grid: GridSpec, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Corner node indices and multilinear weights, each of shape (K, 2**dim)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    lo = np.array(grid.lower)
    h = np.array(grid.spacing)
    nodes = np.array(grid.nodes)
    pos = (pts - lo) / h
    snapped = np.rint(pos)
    pos = np.where(np.abs(pos - snapped) < 1e-9, snapped, pos)
    base = np.clip(np.floor(pos).astype(np.int64), 0, nodes - 2)
    frac = np.clip(pos - base, 0.0, 1.0)
    cols, weights = [], []
    for corner in itertools.product((0, 1), repeat=grid.dim):
        c = np.array(corner)
        idx = base + c
        w = np.prod(np.where(c == 1, frac, 1.0 - frac), axis=1)
        cols.append(np.ravel_multi_index(tuple(idx.T), grid.shape))
        weights.append(w)
    return np.stack(cols, axis=1), np.stack(weights, axis=1)


def interpolation_matrix(grid: GridSpec, pts: np.ndarray) -> sp.csr_matrix:
    """Sparse (K, size) matrix mapping node values to multilinear values at ``pts``."""
    cols, w = _interp_stencil(grid, pts)
    k = cols.shape[0]
    rows = np.repeat(np.arange(k), cols.shape[1])
    return sp.csr_matrix((w.ravel(), (rows, cols.ravel())), shape=(k, grid.size))


def interpolate(V: ValueField | np.ndarray, x: Sequence[float], grid: GridSpec) -> float:
    """Multilinear interpolation of a field at one point inside the closed box."""
    values = V.values if isinstance(V, ValueField) else np.asarray(V, dtype=float)
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != grid.dim:
        raise GridError(f"point has {x.shape[1]} components, grid has {grid.dim}")
    if not grid.contains(x)[0]:
        raise GridError(f"point {tuple(x[0])} lies outside the grid box; clamp it first")
    cols, w = _interp_stencil(grid, x)
    return float(np.dot(values[cols[0]], w[0]))


# --- local generator --------------------------------------------------------


@dataclass
class DiscreteGenerator:
    """Sparse matrix ``L`` with ``L @ V`` approximating the diffusion generator at time ``t``."""

    t: float
    matrix: sp.csr_matrix

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values

    @property
    def diagonal(self) -> np.ndarray:
        return self.matrix.diagonal()

    def min_offdiagonal(self) -> float:
        off = self.matrix - sp.diags(self.matrix.diagonal())
        return float(off.data.min()) if off.nnz else 0.0


def _neighbour(idx: np.ndarray, axis: int, step: int, n: int) -> np.ndarray:
    out = idx.copy()
    k = out[axis] + step
    k = np.where(k < 0, -k, k)
    k = np.where(k > n - 1, 2 * (n - 1) - k, k)
    out[axis] = k
    return out


def build_generator(spec: "ProblemSpec", grid: GridSpec, t: float) -> DiscreteGenerator:
    """Assemble the monotone finite-difference generator at time ``t``.

    First derivatives are upwinded in the sign of the drift; second
    derivatives use central differences; mixed derivatives use the
    diagonal-corner stencil matching the sign of the covariance entry.
    Raises :class:`NonMonotoneError` when a neighbour weight would turn
    negative (mixed terms too large for the grid aspect ratio).
    """
    if not 0.0 <= t <= grid.horizon * (1 + 1e-12):
        raise GridError(f"t={t} outside [0, T]")
    pts = grid.points
    N = grid.size
    n = grid.dim
    h = grid.spacing
    b = spec.eval_drift(t, pts)  # (n, N)
    s = spec.eval_sigma(t, pts)  # (n, d, N)
    a = np.einsum("ikN,jkN->ijN", s, s)  # sigma sigma^T

    idx = np.indices(grid.shape).reshape(n, N)
    rows_all = np.arange(N)
    rows, cols, vals = [], [], []

    def add(target_idx, weight):
        rows.append(rows_all)
        cols.append(np.ravel_multi_index(tuple(target_idx), grid.shape))
        vals.append(weight)

    for i in range(n):
        ni = grid.nodes[i]
        cross = np.zeros(N)
        for j in range(n):
            if j != i:
                cross += np.abs(a[i, j]) / (2.0 * h[i] * h[j])
        axis_w = 0.5 * a[i, i] / h[i] ** 2 - cross
        up = np.maximum(b[i], 0.0) / h[i]
        down = np.maximum(-b[i], 0.0) / h[i]
        # Outward drift at a wall is dropped (no flux through the wall).
        up = np.where(idx[i] == ni - 1, 0.0, up)
        down = np.where(idx[i] == 0, 0.0, down)
        add(_neighbour(idx, i, +1, ni), axis_w + up)
        add(_neighbour(idx, i, -1, ni), axis_w + down)

    for i in range(n):
        for j in range(i + 1, n):
            aij = a[i, j]
            w = np.abs(aij) / (2.0 * h[i] * h[j])
            if not np.any(w):
                continue
            sgn = np.where(aij >= 0, 1, -1)
            for si in (1, -1):
                p = _neighbour(idx, i, si, grid.nodes[i])
                # corner in the direction (si, si*sgn): the positive-coefficient diagonal
                q_plus = _neighbour(p, j, 1, grid.nodes[j])
                q_minus = _neighbour(p, j, -1, grid.nodes[j])
                target = np.where((si * sgn) > 0, q_plus, q_minus)
                add(target, w)

    L = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    L.sum_duplicates()
    L.setdiag(0.0)
    L.eliminate_zeros()
    scale = max(1.0, float(np.max(np.abs(L.data))) if L.nnz else 1.0)
    if L.nnz and L.data.min() < -_MONOTONE_SLACK * scale:
        bad_row = int(L.tocoo().row[np.argmin(L.tocoo().data)])
        raise NonMonotoneError(
            f"negative stencil weight {L.data.min():.3e} at node {tuple(pts[bad_row])}: "
            "cross-diffusion too strong for this grid; refine the coarser axis or equalise spacings"
        )
    L.data = np.maximum(L.data, 0.0)
    L = (L - sp.diags(np.asarray(L.sum(axis=1)).ravel())).tocsr()
    L.sort_indices()
    return DiscreteGenerator(t=t, matrix=L)


# --- nonlocal intervention operator ----------------------------------------


def _impulse_targets(grid: GridSpec, impulses: np.ndarray) -> list[sp.csr_matrix]:
    pts = grid.points
    return [interpolation_matrix(grid, grid.clamp(pts + xi)) for xi in np.atleast_2d(impulses)]


def intervention_operator(V: ValueField, t: float, spec: "ProblemSpec", grid: GridSpec) -> ValueField:
    """``max_xi [V(x + xi) - c(t, x, xi)]`` on every node, targets clamped to the box."""
    values = V.values
    pts = grid.points
    best = np.full(grid.size, -np.inf)
    for P, xi in zip(_impulse_targets(grid, spec.impulse_array), spec.impulse_array):
        best = np.maximum(best, P @ values - spec.eval_cost(t, pts, xi))
    return ValueField(V.m, best)


class Discretization:
    """Per-level caches of every operator a backward sweep needs."""

    def __init__(self, spec: "ProblemSpec", grid: GridSpec):
        if grid.dim != spec.dim:
            raise GridError(f"grid dimension {grid.dim} != problem dimension {spec.dim}")
        if abs(grid.horizon - spec.horizon) > 1e-12 * spec.horizon:
            raise GridError("grid horizon does not match the problem horizon")
        self.spec = spec
        self.grid = grid
        self.impulses = spec.impulse_array
        self.targets = _impulse_targets(grid, self.impulses)
        self._gen: dict[int, DiscreteGenerator] = {}
        self._f: dict[int, np.ndarray] = {}
        self._c: dict[int, np.ndarray] = {}
        self._time_homogeneous_gen = not any(
            "t" in variables(e) for e in spec.drift + tuple(e for row in spec.sigma for e in row)
        )

    @cached_property
    def terminal(self) -> np.ndarray:
        return self.spec.eval_terminal(self.grid.points)

    def generator(self, m: int) -> DiscreteGenerator:
        key = 0 if self._time_homogeneous_gen else m
        if key not in self._gen:
            self._gen[key] = build_generator(self.spec, self.grid, self.grid.times[m])
        return self._gen[key]

    def running(self, m: int) -> np.ndarray:
        if m not in self._f:
            self._f[m] = self.spec.eval_running(self.grid.times[m], self.grid.points)
        return self._f[m]

    def costs(self, m: int) -> np.ndarray:
        """Shape (len(U), size)."""
        if m not in self._c:
            t = self.grid.times[m]
            self._c[m] = np.stack([self.spec.eval_cost(t, self.grid.points, xi) for xi in self.impulses])
        return self._c[m]

    def candidates(self, values: np.ndarray, m: int) -> np.ndarray:
        """Post-impulse values minus cost, one row per impulse."""
        c = self.costs(m)
        return np.stack([P @ values for P in self.targets]) - c

    def intervention(self, values: np.ndarray, m: int) -> np.ndarray:
        return self.candidates(values, m).max(axis=0)
