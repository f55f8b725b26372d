#!/usr/bin/env python3
"""Benchmark the compiled kernels against their pure-numpy twins.

Run after building the extension:

    python benchmarks/bench_kernels.py

Also verifies bit-identical outputs between the two implementations.
"""
import time

import numpy as np

from factored_ope import kernels
from factored_ope.domains import make_taxi, random_fmdp
from factored_ope.fmdp import Policy, sample_batch


def _flat_args(mdp):
    f = mdp._flat
    return (f["cpt_flat"], f["cpt_off"], f["par_flat"], f["par_off"],
            mdp.gamma, mdp.n_actions)


def bench_step(mdp, label, n=20000, reps=20):
    rng = np.random.default_rng(0)
    states = mdp.rho.sample_batch(rng.random((n, mdp.n_vars)))
    actions = rng.integers(0, mdp.n_actions, n)
    u = rng.random((n, mdp.n_vars))
    results = {}
    for name, impl in kernels.implementations():
        out = np.empty_like(states)
        impl.step_batch(states, actions, u, *_flat_args(mdp), out)  # warmup
        t0 = time.perf_counter()
        for _ in range(reps):
            impl.step_batch(states, actions, u, *_flat_args(mdp), out)
        dt = (time.perf_counter() - t0) / reps
        results[name] = (dt, out.copy())
        print(f"  step_batch[{label}] {name:7s}: {n / dt / 1e6:8.2f} M lanes/s")
    names = list(results)
    if len(names) == 2:
        assert np.array_equal(results[names[0]][1], results[names[1]][1]), \
            "twin implementations disagree"
        print(f"  speedup: {results['python'][0] / results['cython'][0]:.1f}x, "
              f"outputs bit-identical")


def bench_hamming(n=200000, d=20, reps=20):
    rng = np.random.default_rng(1)
    pool = rng.integers(0, 2, (n, d)).astype(np.int16)
    query = np.ascontiguousarray(pool[123])
    results = {}
    for name, impl in kernels.implementations():
        out = np.empty(n, dtype=np.int32)
        impl.hamming_into(pool, query, out)
        t0 = time.perf_counter()
        for _ in range(reps):
            impl.hamming_into(pool, query, out)
        dt = (time.perf_counter() - t0) / reps
        results[name] = (dt, out.copy())
        print(f"  hamming[{n}x{d}]   {name:7s}: {n / dt / 1e6:8.2f} M rows/s")
    names = list(results)
    if len(names) == 2:
        assert np.array_equal(results[names[0]][1], results[names[1]][1])
        print(f"  speedup: {results['python'][0] / results['cython'][0]:.1f}x, "
              f"outputs bit-identical")


def bench_end_to_end():
    mdp = random_fmdp(20, 2, 2, seed=0, horizon=200)
    t0 = time.perf_counter()
    sample_batch(mdp, Policy.uniform(2), 200, master_seed=0)
    dt = time.perf_counter() - t0
    print(f"  sample_batch[D=20, H=200, T=200] ({kernels.BACKEND}): {dt:.2f} s")


if __name__ == "__main__":
    print(f"active backend: {kernels.BACKEND} (compiled available: {kernels.HAVE_COMPILED})")
    bench_step(make_taxi(), "taxi")
    bench_step(random_fmdp(20, 2, 2, seed=0), "rfmdp-20")
    bench_hamming()
    bench_end_to_end()
