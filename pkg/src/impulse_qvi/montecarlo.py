"""Monte Carlo simulation of the controlled diffusion under a grid policy.

Paths are split into fixed-size blocks.  Block ``k`` draws its normals from a
Philox generator keyed by ``SeedSequence(seed, spawn_key=(k,))``, so results
are bit-identical for any number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError
from .grid import GridSpec
from .policy import CONTINUE, Policy
from .problem import ProblemSpec

__all__ = ["SimConfig", "SimReport", "simulate_paths", "feynman_kac_v0", "default_impulse_cap",
           "RNG_DESCRIPTION"]

RNG_DESCRIPTION = "numpy Philox4x64-10, SeedSequence(seed, spawn_key=(block,))"
BLOCK_SIZE = 4096


@dataclass(frozen=True)
class SimConfig:
    x0: tuple[float, ...]
    t0: float = 0.0
    paths: int = 10_000
    dt: float = 0.01
    seed: int = 0
    impulse_cap: Optional[int] = None
    antithetic: bool = False
    threads: int = 1
    max_impulses_per_step: Optional[int] = 1  # None: chain up to the cap

    def __post_init__(self):
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        if self.paths < 1:
            raise ConfigError("path count must be >= 1")
        if not self.dt > 0:
            raise ConfigError("simulation dt must be positive")
        if self.impulse_cap is not None and self.impulse_cap < 1:
            raise ConfigError("impulse cap must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.max_impulses_per_step is not None and self.max_impulses_per_step < 1:
            raise ConfigError("max_impulses_per_step must be >= 1")


@dataclass
class SimReport:
    mean: float
    stderr: float
    paths: int
    steps: int
    dt: float
    mean_cost: float
    mean_impulses: float
    impulse_histogram: dict[int, int]
    flagged: int
    impulse_cap: int
    seed: int
    payoffs: np.ndarray = field(repr=False)
    impulse_counts: np.ndarray = field(repr=False)
    total_costs: np.ndarray = field(repr=False)
    rng: str = RNG_DESCRIPTION

    @property
    def flagged_fraction(self) -> float:
        return self.flagged / self.paths

    def summary(self) -> str:
        hist = ", ".join(f"{k}:{v}" for k, v in sorted(self.impulse_histogram.items()))
        return "\n".join([
            f"estimate = {self.mean!r}",
            f"stderr = {self.stderr!r}",
            f"paths = {self.paths}",
            f"steps = {self.steps}",
            f"dt = {self.dt!r}",
            f"mean_total_cost = {self.mean_cost!r}",
            f"mean_impulse_count = {self.mean_impulses!r}",
            f"impulse_histogram = {{{hist}}}",
            f"impulse_cap = {self.impulse_cap}",
            f"flagged_paths = {self.flagged} ({self.flagged_fraction!r})",
            f"rng = {self.rng}",
            f"seed = {self.seed}",
        ])


def default_impulse_cap(spec: ProblemSpec, grid: GridSpec) -> int:
    """``ceil(10 (T |f|_inf + |g|_inf) / k)`` with sup-norms sampled on the grid."""
    pts = grid.points
    f_sup = max(float(np.abs(spec.eval_running(t, pts)).max()) for t in grid.times)
    g_sup = float(np.abs(spec.eval_terminal(pts)).max())
    bound = spec.horizon * f_sup + g_sup
    return max(1, math.ceil(10.0 * bound / spec.cost_floor))


class _Simulator:
    def __init__(self, spec: ProblemSpec, policy: Policy | None, grid: GridSpec | None, cfg: SimConfig,
                 cap: int):
        if len(cfg.x0) != spec.dim:
            raise ConfigError(f"x0 has {len(cfg.x0)} components, problem has {spec.dim}")
        T = spec.horizon
        if not 0.0 <= cfg.t0 < T:
            raise ConfigError("t0 must lie in [0, T)")
        self.spec = spec
        self.policy = policy
        self.grid = grid
        self.cfg = cfg
        self.cap = cap
        self.steps = max(1, math.ceil((T - cfg.t0) / cfg.dt - 1e-9))
        self.dt = (T - cfg.t0) / self.steps
        self.U = spec.impulse_array
        if grid is not None:
            lo, hi = grid.trust_region(self.U)
            self.trust_lo, self.trust_hi = np.array(lo), np.array(hi)
            self.box_lo, self.box_hi = np.asarray(grid.lower, float), np.asarray(grid.upper, float)

    def run_block(self, block: int, size: int):
        spec, cfg = self.spec, self.cfg
        ss = np.random.SeedSequence(cfg.seed, spawn_key=(block,))
        rng = np.random.Generator(np.random.Philox(ss))
        d = spec.noise_dim
        X = np.tile(np.asarray(cfg.x0)[:, None], (1, size))  # (dim, size)
        running = np.zeros(size)
        costs = np.zeros(size)
        counts = np.zeros(size, dtype=np.int64)
        flagged = np.zeros(size, dtype=bool)
        sqdt = math.sqrt(self.dt)
        for k in range(self.steps):
            t = cfg.t0 + k * self.dt
            if self.grid is not None:
                flagged |= self._outside(X)
            if self.policy is not None:
                self._intervene(t, X, costs, counts)
            running += spec.eval_running(t, X.T) * self.dt
            if cfg.antithetic:
                half = rng.standard_normal((d, (size + 1) // 2))
                Z = np.concatenate([half, -half], axis=1)[:, :size]
            else:
                Z = rng.standard_normal((d, size))
            b = spec.eval_drift(t, X.T)
            s = spec.eval_sigma(t, X.T)
            X = X + b * self.dt + np.einsum("ijk,jk->ik", s, Z) * sqdt
        if self.grid is not None:
            flagged |= self._outside(X)
        payoff = running - costs + spec.eval_terminal(X.T)
        return payoff, counts, costs, flagged

    def _outside(self, X: np.ndarray) -> np.ndarray:
        return np.any((X.T < self.trust_lo) | (X.T > self.trust_hi), axis=1)

    def _intervene(self, t: float, X: np.ndarray, costs: np.ndarray, counts: np.ndarray):
        grid = self.grid
        m = min(grid.time_steps, max(0, int(round(t / grid.dt))))
        if m >= grid.time_steps:
            return
        limit = self.cfg.max_impulses_per_step or self.cap
        for _ in range(limit):
            nodes = grid.nearest_node(X.T)
            act = self.policy.actions[m, nodes]
            act = np.where(counts < self.cap, act, CONTINUE)
            if np.all(act == CONTINUE):
                return
            for j in np.unique(act[act != CONTINUE]):
                sel = act == j
                xi = self.U[j]
                costs[sel] += self.spec.eval_cost(t, X[:, sel].T, xi)
                # Mirror the solver: impulse targets are clamped to the box.
                X[:, sel] = np.clip(X[:, sel] + xi[:, None], self.box_lo[:, None], self.box_hi[:, None])
                counts[sel] += 1


def _run(sim: _Simulator) -> SimReport:
    cfg = sim.cfg
    blocks = [(k, min(BLOCK_SIZE, cfg.paths - k * BLOCK_SIZE))
              for k in range(math.ceil(cfg.paths / BLOCK_SIZE))]
    if cfg.threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(lambda b: sim.run_block(*b), blocks))
    else:
        parts = [sim.run_block(*b) for b in blocks]
    payoff = np.concatenate([p[0] for p in parts])
    counts = np.concatenate([p[1] for p in parts])
    costs = np.concatenate([p[2] for p in parts])
    flagged = np.concatenate([p[3] for p in parts])
    n = payoff.size
    # exactly rounded sums: constant payoffs give their value and zero spread
    mean = math.fsum(payoff) / n
    stderr = math.sqrt(math.fsum((payoff - mean) ** 2) / (n - 1) / n) if n > 1 else 0.0
    hist = {int(k): int(v) for k, v in zip(*np.unique(counts, return_counts=True))}
    return SimReport(
        mean=mean,
        stderr=stderr,
        paths=n,
        steps=sim.steps,
        dt=sim.dt,
        mean_cost=float(costs.mean()),
        mean_impulses=float(counts.mean()),
        impulse_histogram=hist,
        flagged=int(flagged.sum()),
        impulse_cap=sim.cap,
        seed=cfg.seed,
        payoffs=payoff,
        impulse_counts=counts,
        total_costs=costs,
    )


def simulate_paths(spec: ProblemSpec, policy: Policy, grid: GridSpec, cfg: SimConfig) -> SimReport:
    """Euler-Maruyama paths under ``policy``; estimate of the gain functional.

    At each step the policy label of the nearest node at the nearest time
    level is looked up and applied, at most ``max_impulses_per_step`` times
    (default one) and only while the path is under its impulse cap.  The
    solver allows chains of impulses within one time level; with a simulation
    step several times finer than the grid step these are realised on
    consecutive substeps.  Each cost
    is charged at the pre-impulse state, and post-impulse states are clamped
    to the box exactly as the solver clamps impulse targets.  Paths leaving the trust region are counted in
    ``flagged`` but still contribute to the estimate.
    """
    cap = cfg.impulse_cap if cfg.impulse_cap is not None else default_impulse_cap(spec, grid)
    return _run(_Simulator(spec, policy, grid, cfg, cap))


def feynman_kac_v0(spec: ProblemSpec, cfg: SimConfig) -> SimReport:
    """Uncontrolled estimate of ``E[int f dt + g(X_T)]``."""
    return _run(_Simulator(spec, None, None, cfg, cap=cfg.impulse_cap or 1))
