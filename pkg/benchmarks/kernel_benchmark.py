"""Timing comparison of the compiled energy/gradient kernel vs the numpy twin.

Run:  python3 benchmarks/kernel_benchmark.py [--sizes 900,6449] [--repeats 20]
"""

import argparse
import time

import numpy as np

from bodyfit import _kernels_py

try:
    from bodyfit import _kernels as _compiled
except ImportError:
    _compiled = None


def make_instance(rng, n):
    A = np.ascontiguousarray(np.tile(np.eye(3, 4).reshape(12), (n, 1))
                             + 0.05 * rng.normal(size=(n, 12)))
    P = np.ascontiguousarray(rng.normal(size=(n, 3)) * 500)
    corr = np.ascontiguousarray(P + rng.normal(size=(n, 3)) * 5)
    wa = rng.uniform(0, 1, size=n)
    edges = np.unique(np.sort(rng.integers(0, n, size=(3 * n, 2)), axis=1), axis=0)
    edges = np.ascontiguousarray(edges[edges[:, 0] != edges[:, 1]], dtype=np.intp)
    lm_idx = np.ascontiguousarray(rng.choice(n, size=12, replace=False), dtype=np.intp)
    lm_target = np.ascontiguousarray(rng.normal(size=(12, 3)) * 500)
    return A, P, corr, wa, edges, 1e4, lm_idx, lm_target, 1e-3


def bench(fn, args, repeats):
    fn(*args)  # warm-up
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="900,6449")
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'n':>6} {'edges':>7} {'numpy (ms)':>11} {'cython (ms)':>12} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        inst = make_instance(rng, n)
        t_py = bench(_kernels_py.energy_grad, inst, args.repeats)
        if _compiled is None:
            print(f"{n:>6} {len(inst[4]):>7} {t_py * 1e3:>11.3f} {'n/a':>12} {'n/a':>8}")
            continue
        t_cy = bench(_compiled.energy_grad, inst, args.repeats)
        e_py, g_py = _kernels_py.energy_grad(*inst)
        e_cy, g_cy = _compiled.energy_grad(*inst)
        assert abs(e_py - e_cy) < 1e-6 * max(1.0, abs(e_py)), "kernel mismatch"
        print(f"{n:>6} {len(inst[4]):>7} {t_py * 1e3:>11.3f} {t_cy * 1e3:>12.3f} "
              f"{t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
