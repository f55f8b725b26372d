"""Pure-numpy twins of the compiled kernels.

The contract shared with ``_ckernels`` is exact: given the same uniform
stream, both implementations return bit-identical samples.  Cumulative sums
run left to right in both, and a uniform that lands beyond the row total
(possible when a row sums to 1 - eps) selects the last symbol.
"""
from __future__ import annotations

import numpy as np


def step_batch(states, actions, u, cpt_flat, cpt_off, par_flat, par_off,
               gamma, n_actions, out):
    n, n_vars = states.shape
    for i in range(n_vars):
        par = par_flat[par_off[i]:par_off[i + 1]]
        rank = np.zeros(n, dtype=np.int64)
        for p in par:
            rank *= gamma
            rank += states[:, p]
        base = cpt_off[i] + (rank * n_actions + actions) * gamma
        rows = cpt_flat[base[:, None] + np.arange(gamma)]
        cum = np.cumsum(rows, axis=1)
        hit = cum > u[:, i, None]
        y = np.argmax(hit, axis=1)
        y[~hit[:, -1]] = gamma - 1
        out[:, i] = y.astype(np.int16)
    return out


def hamming_into(pool, query, out):
    np.sum(pool != query[None, :], axis=1, dtype=np.int32, out=out)
    return out
