"""Compiled core against the numpy fallback on the two hot paths.

    python benchmarks/bench_backends.py [--repeats 7] [--k 10]

Greedy MAP is timed over pool sizes; batched subset determinants with
adjugates are timed at the training workload (5000 negative subsets).
Both backends must agree before any timing is reported.
"""

import argparse
import time

import numpy as np

from dppselect import _backend, _fallback


def best_ms(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(1e3 * (time.perf_counter() - t0))
    return min(times)


def unit_kernel(rng, n, d=64):
    V = rng.standard_normal((n, d))
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    return np.ascontiguousarray(V @ V.T)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if _backend.compiled is None:
        raise SystemExit("compiled core not built; run `python setup.py build_ext --inplace` first")
    core, rng = _backend.compiled, np.random.default_rng(args.seed)

    print(f"greedy_map, k={args.k} (best of {args.repeats}, ms)")
    print(f"{'N':>6} {'cython':>10} {'numpy':>10} {'speedup':>8}")
    for n in (250, 500, 1000, 2000, 4000):
        K = unit_kernel(rng, n)
        a, b = core.greedy_map(K, args.k, 1e-10), _fallback.greedy_map(K, args.k, 1e-10)
        assert list(a[0]) == list(b[0]) and np.allclose(a[1], b[1], rtol=1e-10)
        tc = best_ms(lambda: core.greedy_map(K, args.k, 1e-10), args.repeats)
        tp = best_ms(lambda: _fallback.greedy_map(K, args.k, 1e-10), args.repeats)
        print(f"{n:>6} {tc:>10.3f} {tp:>10.3f} {tp / tc:>7.1f}x")

    print(f"\nsubset_dets_adj, 5000 subsets (best of {args.repeats}, ms)")
    print(f"{'k':>6} {'cython':>10} {'numpy':>10} {'speedup':>8}")
    L = unit_kernel(rng, 20, d=32)
    for k in (2, 3, 4):
        S = np.ascontiguousarray(np.sort(np.array([rng.choice(20, k, replace=False) for _ in range(5000)]), axis=1))
        (da, aa), (db, ab) = core.subset_dets_adj(L, S), _fallback.subset_dets_adj(L, S)
        assert np.allclose(da, db, atol=1e-12) and np.allclose(aa, ab, atol=1e-12)
        tc = best_ms(lambda: core.subset_dets_adj(L, S), args.repeats)
        tp = best_ms(lambda: _fallback.subset_dets_adj(L, S), args.repeats)
        print(f"{k:>6} {tc:>10.3f} {tp:>10.3f} {tp / tc:>7.1f}x")


if __name__ == "__main__":
    main()
