"""Backward solvers for the impulse-control QVI.

``V^0`` is the no-intervention value.  ``V^n`` (at most ``n`` interventions)
solves an obstacle problem whose obstacle is the intervention operator applied
to ``V^{n-1}`` at the same time level; the sequence increases to the QVI
solution and the cascade stops on a small sup-norm increment.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ._kernels import projected_sor
from .errors import CFLError, ConfigError, ConvergenceError
from .grid import Discretization, GridSpec, ValueField
from .problem import ProblemSpec

__all__ = [
    "SolveConfig",
    "SolveResult",
    "QVIResiduals",
    "solve_pde_step",
    "solve_obstacle_step",
    "solve_v0",
    "iterated_optimal_stopping",
    "fixed_point_from_above",
    "qvi_residuals",
    "dpp_restart_check",
    "exp_transform",
    "inverse_exp_transform",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveConfig:
    theta: float = 1.0
    obstacle_tol: float = 1e-12
    cascade_tol: float = 1e-6
    cascade_max: int = 50
    linear_tol: float = 1e-12
    max_sweeps: int = 100_000
    relaxation: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError("theta must lie in [0, 1]")
        for name in ("obstacle_tol", "cascade_tol", "linear_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.cascade_max < 1 or self.max_sweeps < 1:
            raise ConfigError("cascade_max and max_sweeps must be >= 1")
        if not 0.0 < self.relaxation < 2.0:
            raise ConfigError("relaxation factor must lie in (0, 2)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SolveResult:
    """Value field on every time level plus the cascade record.

    ``increments[k]`` and ``min_increments[k]`` are the sup and inf over all
    nodes and levels of ``V^{k+1} - V^k``.
    """

    grid: GridSpec
    values: np.ndarray  # (time_steps + 1, size)
    config: SolveConfig
    increments: list[float] = field(default_factory=list)
    min_increments: list[float] = field(default_factory=list)
    n_used: int = 0
    converged: bool = True
    residual_summary: Optional[float] = None
    levels: Optional[list[np.ndarray]] = None
    exp_scaled: bool = False
    mode: str = "cascade"

    def field(self, m: int) -> ValueField:
        return ValueField(m, self.values[m])


class _Stepper:
    """One backward time step of the theta scheme, with per-level matrix caching."""

    def __init__(self, disc: Discretization, cfg: SolveConfig):
        self.disc = disc
        self.cfg = cfg
        self._A: dict[int, sp.csr_matrix] = {}

    def system(self, m: int, v_next: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
        cfg, disc = self.cfg, self.disc
        dt = disc.grid.dt
        th = cfg.theta
        L = disc.generator(m)
        key = id(L)
        if key not in self._A:
            A = sp.identity(disc.grid.size, format="csr") - (th * dt) * L.matrix
            A = A.tocsr()
            A.sort_indices()
            self._A[key] = A
        rhs = v_next + dt * th * disc.running(m)
        if th < 1.0:
            L1 = disc.generator(m + 1)
            worst = 1.0 + (1.0 - th) * dt * float(L1.diagonal.min())
            if worst < 0:
                raise CFLError(
                    f"explicit part violates the CFL bound at level {m + 1} "
                    f"(1 + (1-theta) dt min diag = {worst:.3e}); reduce dt or raise theta"
                )
            rhs = rhs + (1.0 - th) * dt * (L1.apply(v_next) + disc.running(m + 1))
        return self._A[key], rhs

    def step(self, m: int, v_next: np.ndarray, obstacle: np.ndarray | None = None) -> np.ndarray:
        A, rhs = self.system(m, v_next)
        if obstacle is None:
            lower = np.full_like(rhs, -np.inf)
            x = v_next.astype(float, copy=True)
            tol = self.cfg.linear_tol
        else:
            lower = np.asarray(obstacle, dtype=float)
            x = np.maximum(v_next, lower)
            tol = self.cfg.obstacle_tol
        sweeps, change = projected_sor(
            A.indptr, A.indices, A.data, rhs, lower, x, self.cfg.relaxation, tol, self.cfg.max_sweeps
        )
        if sweeps < 0:
            raise ConvergenceError(
                f"relaxation did not converge in {self.cfg.max_sweeps} sweeps at level {m}", change
            )
        return x


def _discretization(spec: ProblemSpec, grid: GridSpec, disc: Discretization | None) -> Discretization:
    return disc if disc is not None else Discretization(spec, grid)


def solve_pde_step(V_next: ValueField, t: float, spec: ProblemSpec, grid: GridSpec,
                   cfg: SolveConfig = SolveConfig(), disc: Discretization | None = None) -> ValueField:
    """One backward step of ``dV/dt + LV + f = 0`` from ``t + dt`` to ``t``."""
    m = grid.level(t)
    stepper = _Stepper(_discretization(spec, grid, disc), cfg)
    return ValueField(m, stepper.step(m, V_next.values))


def solve_obstacle_step(V_next: ValueField, obstacle: ValueField, t: float, spec: ProblemSpec,
                        grid: GridSpec, cfg: SolveConfig = SolveConfig(),
                        disc: Discretization | None = None) -> ValueField:
    """One backward step of ``min(-dV/dt - LV - f, V - obstacle) = 0``."""
    m = grid.level(t)
    stepper = _Stepper(_discretization(spec, grid, disc), cfg)
    return ValueField(m, stepper.step(m, V_next.values, obstacle.values))


def _sweep(stepper: _Stepper, terminal: np.ndarray, m_end: int, previous: np.ndarray | None) -> np.ndarray:
    """Full backward sweep over levels ``m_end-1 .. 0``.

    Without ``previous`` no obstacle is used; otherwise the obstacle at level
    ``m`` is the intervention operator applied to ``previous[m]``.
    """
    disc = stepper.disc
    out = np.empty((m_end + 1, terminal.size))
    out[m_end] = terminal
    for m in range(m_end - 1, -1, -1):
        obstacle = None if previous is None else disc.intervention(previous[m], m)
        out[m] = stepper.step(m, out[m + 1], obstacle)
    return out


def _cascade(stepper: _Stepper, terminal: np.ndarray, m_end: int, keep_levels: bool) -> SolveResult:
    cfg = stepper.cfg
    prev = _sweep(stepper, terminal, m_end, None)
    levels = [prev] if keep_levels else None
    incs, mins = [], []
    converged = False
    n = 0
    for n in range(1, cfg.cascade_max + 1):
        cur = _sweep(stepper, terminal, m_end, prev)
        diff = cur - prev
        incs.append(float(diff.max()))
        mins.append(float(diff.min()))
        logger.debug("cascade n=%d increment=%.3e", n, incs[-1])
        if keep_levels:
            levels.append(cur)
        prev = cur
        if incs[-1] < cfg.cascade_tol:
            converged = True
            break
    if not converged:
        logger.warning("cascade stopped at n_max=%d with increment %.3e", n, incs[-1])
    return SolveResult(
        grid=stepper.disc.grid,
        values=prev,
        config=cfg,
        increments=incs,
        min_increments=mins,
        n_used=n,
        converged=converged,
        levels=levels,
    )


def solve_v0(spec: ProblemSpec, grid: GridSpec, cfg: SolveConfig = SolveConfig(),
             disc: Discretization | None = None) -> SolveResult:
    """Value with no interventions: backward sweep from ``V(T) = g``."""
    disc = _discretization(spec, grid, disc)
    values = _sweep(_Stepper(disc, cfg), disc.terminal, grid.time_steps, None)
    return SolveResult(grid=grid, values=values, config=cfg, mode="v0")


def iterated_optimal_stopping(spec: ProblemSpec, grid: GridSpec, cfg: SolveConfig = SolveConfig(),
                              keep_levels: bool = False,
                              disc: Discretization | None = None) -> SolveResult:
    """Cascade ``V^0, V^1, ...`` until the sup-norm increment drops below ``cascade_tol``.

    Hitting ``cascade_max`` is not an error: the result comes back with
    ``converged=False`` and the full increment history.  No intervention is
    applied at the terminal level.
    """
    disc = _discretization(spec, grid, disc)
    result = _cascade(_Stepper(disc, cfg), disc.terminal, grid.time_steps, keep_levels)
    result.residual_summary = qvi_residuals(result, spec, grid, disc).summary
    return result


def fixed_point_from_above(spec: ProblemSpec, grid: GridSpec, cfg: SolveConfig = SolveConfig(),
                           bound: float | None = None,
                           disc: Discretization | None = None) -> SolveResult:
    """Iterate the obstacle map starting from a constant upper bound.

    Starts from ``bound`` (default: sampled ``T |f|_inf + |g|_inf``) on every
    level before maturity, so the iterates decrease towards the same fixed
    point the cascade approaches from below.  ``increments`` records the sup
    of each decrease.
    """
    disc = _discretization(spec, grid, disc)
    stepper = _Stepper(disc, cfg)
    M = grid.time_steps
    if bound is None:
        f_sup = max(float(np.abs(disc.running(m)).max()) for m in range(M + 1))
        bound = spec.horizon * f_sup + float(np.abs(disc.terminal).max())
    prev = np.full((M + 1, grid.size), float(bound))
    prev[M] = disc.terminal
    decs = []
    converged = False
    n = 0
    for n in range(1, cfg.cascade_max + 1):
        cur = _sweep(stepper, disc.terminal, M, prev)
        decs.append(float((prev - cur).max()))
        prev = cur
        if decs[-1] < cfg.cascade_tol:
            converged = True
            break
    result = SolveResult(grid=grid, values=prev, config=cfg, increments=decs,
                         min_increments=[], n_used=n, converged=converged, mode="from-above")
    result.residual_summary = qvi_residuals(result, spec, grid, disc).summary
    return result


@dataclass
class QVIResiduals:
    """Nodewise residuals on levels ``0 .. M-1``.

    ``pde`` is the discrete ``-dV/dt - LV - f``, ``obstacle`` is ``V - MV``,
    and ``complementarity`` is their nodewise minimum.  ``summary`` is the sup
    of ``|complementarity|`` over interior trust-region nodes.
    """

    pde: np.ndarray
    obstacle: np.ndarray
    complementarity: np.ndarray
    mask: np.ndarray
    summary: float


def qvi_residuals(result: SolveResult, spec: ProblemSpec, grid: GridSpec,
                  disc: Discretization | None = None) -> QVIResiduals:
    disc = _discretization(spec, grid, disc)
    V = result.values
    M = grid.time_steps
    dt = grid.dt
    th = result.config.theta
    pde = np.empty((M, grid.size))
    obs = np.empty((M, grid.size))
    for m in range(M):
        local = th * (disc.generator(m).apply(V[m]) + disc.running(m))
        if th < 1.0:
            local += (1.0 - th) * (disc.generator(m + 1).apply(V[m + 1]) + disc.running(m + 1))
        pde[m] = (V[m] - V[m + 1]) / dt - local
        obs[m] = V[m] - disc.intervention(V[m], m)
    comp = np.minimum(pde, obs)
    mask = grid.trust_mask(spec.impulse_array, interior=True)
    summary = float(np.abs(comp[:, mask]).max()) if mask.any() else 0.0
    return QVIResiduals(pde=pde, obstacle=obs, complementarity=comp, mask=mask, summary=summary)


def dpp_restart_check(result: SolveResult, r_index: int, spec: ProblemSpec, grid: GridSpec,
                      cfg: SolveConfig | None = None, disc: Discretization | None = None) -> float:
    """Re-solve on ``[0, t_r]`` with ``V(t_r, .)`` as terminal data.

    Returns ``|V_restart(0, .) - V(0, .)|_inf``.
    """
    if not 0 <= r_index <= grid.time_steps:
        raise ConfigError(f"restart index {r_index} outside 0..{grid.time_steps}")
    cfg = cfg or result.config
    disc = _discretization(spec, grid, disc)
    restart = _cascade(_Stepper(disc, cfg), result.values[r_index].copy(), r_index, False)
    return float(np.abs(restart.values[0] - result.values[0]).max())


def exp_transform(result: SolveResult) -> SolveResult:
    """``Gamma(t, x) = exp(t) V(t, x)`` on every level."""
    scale = np.exp(result.grid.times)[:, None]
    return dataclasses.replace(result, values=result.values * scale, exp_scaled=True, levels=None)


def inverse_exp_transform(result: SolveResult) -> SolveResult:
    scale = np.exp(result.grid.times)[:, None]
    return dataclasses.replace(result, values=result.values / scale, exp_scaled=False, levels=None)
