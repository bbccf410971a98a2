"""Intervention policy read off a converged value field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Discretization, GridSpec
from .problem import ProblemSpec
from .solver import SolveResult

__all__ = ["CONTINUE", "Policy", "extract_policy", "default_contact_tol"]

CONTINUE = -1

# Candidates within this of the best impulse value count as co-maximisers.
ARGMAX_TOL = 1e-12

# Lower limit on the default contact tolerance, for results whose residual summary is exactly 0.
MIN_CONTACT_TOL = 1e-10


@dataclass
class Policy:
    """Per level and node: ``CONTINUE`` or the index of the impulse to apply.

    ``multiple_maximisers`` flags nodes where more than one impulse attains
    the max (the lowest index is used).
    """

    grid: GridSpec
    actions: np.ndarray  # int (time_steps + 1, size)
    contact_tol: float
    multiple_maximisers: np.ndarray  # bool, same shape

    def action(self, m: int, node: int) -> int:
        return int(self.actions[m, node])

    @property
    def intervention_fraction(self) -> float:
        return float(np.mean(self.actions[:-1] != CONTINUE))

    @classmethod
    def continue_everywhere(cls, grid: GridSpec) -> "Policy":
        shape = (grid.time_steps + 1, grid.size)
        return cls(grid, np.full(shape, CONTINUE, dtype=np.int64), 0.0, np.zeros(shape, dtype=bool))


def default_contact_tol(result: SolveResult) -> float:
    summary = result.residual_summary or 0.0
    return max(2.0 * summary, MIN_CONTACT_TOL)


def extract_policy(result: SolveResult, spec: ProblemSpec, grid: GridSpec,
                   contact_tol: float | None = None, disc: Discretization | None = None) -> Policy:
    """Label each node ``Impulse(j)`` where ``V - MV <= contact_tol``, else ``CONTINUE``.

    ``j`` is the lowest-index maximiser of ``V(x + xi_j) - c(t, x, xi_j)``.
    The terminal level is always ``CONTINUE``.
    """
    if contact_tol is None:
        contact_tol = default_contact_tol(result)
    if contact_tol < 0:
        raise ValueError("contact_tol must be nonnegative")
    disc = disc if disc is not None else Discretization(spec, grid)
    M = grid.time_steps
    actions = np.full((M + 1, grid.size), CONTINUE, dtype=np.int64)
    multi = np.zeros((M + 1, grid.size), dtype=bool)
    for m in range(M):
        cand = disc.candidates(result.values[m], m)
        best = cand.max(axis=0)
        near = cand >= best - ARGMAX_TOL
        arg = np.argmax(near, axis=0)
        contact = result.values[m] - best <= contact_tol
        actions[m] = np.where(contact, arg, CONTINUE)
        multi[m] = contact & (near.sum(axis=0) > 1)
    return Policy(grid=grid, actions=actions, contact_tol=float(contact_tol), multiple_maximisers=multi)
