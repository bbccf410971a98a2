"""Compiled relaxation sweeps."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def projected_sor(indptr, indices, data, rhs, lower, x, omega, tol, max_sweeps):
    """In-place projected SOR for ``A x = rhs`` subject to ``x >= lower``.

    ``A`` is CSR.  Nodes are swept in index order; each update is followed by
    the projection ``max(x_i, lower_i)``.  Stops when the largest update in a
    sweep is ``<= tol * max(1, |x|_inf)``.  Returns ``(sweeps, last_change)``;
    ``sweeps == -1`` signals non-convergence.
    """
    n = rhs.shape[0]
    change = np.inf
    for sweep in range(1, max_sweeps + 1):
        change = 0.0
        scale = 1.0
        for i in range(n):
            diag = 0.0
            s = rhs[i]
            for k in range(indptr[i], indptr[i + 1]):
                j = indices[k]
                if j == i:
                    diag += data[k]
                else:
                    s -= data[k] * x[j]
            new = x[i] + omega * (s / diag - x[i])
            if new < lower[i]:
                new = lower[i]
            d = abs(new - x[i])
            if d > change:
                change = d
            x[i] = new
            if abs(new) > scale:
                scale = abs(new)
        if change <= tol * scale:
            return sweep, change
    return -1, change
