# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: batched factored-state stepping and Hamming distances.

Both functions have pure-numpy twins in ``_pykernels`` with bit-identical
output contracts (same uniform stream in, same samples out), which lets the
dispatcher swap implementations freely.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def step_batch(short[:, ::1] states, long[::1] actions, double[:, ::1] u,
               double[::1] cpt_flat, long[::1] cpt_off,
               long[::1] par_flat, long[::1] par_off,
               long gamma, long n_actions, short[:, ::1] out):
    """Sample one factored transition for every lane.

    ``cpt_flat`` holds, per variable i, rows laid out as
    [rank * n_actions + action] * gamma contiguous probabilities starting at
    ``cpt_off[i]``.  Next values are drawn by inverse CDF on ``u[lane, i]``:
    the first symbol whose running sum exceeds the uniform.
    """
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t n_vars = states.shape[1]
    cdef Py_ssize_t lane, i, p, y
    cdef long rank, base
    cdef double cum, uu

    for lane in range(n):
        for i in range(n_vars):
            rank = 0
            for p in range(par_off[i], par_off[i + 1]):
                rank = rank * gamma + states[lane, par_flat[p]]
            base = cpt_off[i] + (rank * n_actions + actions[lane]) * gamma
            uu = u[lane, i]
            cum = 0.0
            out[lane, i] = <short> (gamma - 1)
            for y in range(gamma):
                cum += cpt_flat[base + y]
                if cum > uu:
                    out[lane, i] = <short> y
                    break
    return np.asarray(out)


def hamming_into(short[:, ::1] pool, short[::1] query, int[::1] out):
    """Write the Hamming distance from ``query`` to every pool row into ``out``."""
    cdef Py_ssize_t m = pool.shape[0]
    cdef Py_ssize_t d = pool.shape[1]
    cdef Py_ssize_t r, c
    cdef int acc

    for r in range(m):
        acc = 0
        for c in range(d):
            if pool[r, c] != query[c]:
                acc += 1
        out[r] = acc
    return np.asarray(out)
