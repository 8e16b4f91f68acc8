"""Benchmark the compiled kernels against the numpy fallbacks.

Run from a checkout with the extension built:

    python benchmarks/bench_kernels.py

Covers the two hot loops: the fused W0 stencil application (the inner cost
of every conjugate-gradient iteration) and the Metropolis sweep kernel
(the inner cost of every Monte Carlo study).
"""

import time

import numpy as np

from wittenlab import kernels
from wittenlab.lattice import build_lattice
from wittenlab.potential import kac_potential


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_stencil():
    print("fused W0 stencil apply (order-4, one CG inner step)")
    print(f"{'grid':>18} {'numpy':>12} {'compiled':>12} {'speedup':>8}")
    for n, m in ((2, 65), (3, 33), (4, 13), (6, 9)):
        N = m ** n
        rng = np.random.default_rng(0)
        u = rng.standard_normal(N)
        pot = rng.standard_normal(N)
        args = (u, pot, n, m, 7.1112)
        t_np = timeit(lambda: kernels.w0_apply(*args, order=4,
                                               force_numpy=True), 7)
        if not kernels.COMPILED:
            print(f"{n}x{m} (N={N:>7}): numpy {t_np*1e3:9.3f} ms "
                  "(extension not built)")
            continue
        t_c = timeit(lambda: kernels.w0_apply(*args, order=4), 7)
        print(f"{f'{n}d m={m}':>12} N={N:>7} {t_np*1e3:9.3f} ms "
              f"{t_c*1e3:9.3f} ms {t_np/t_c:7.1f}x")


def bench_metropolis():
    print("\nMetropolis sweeps (Kac chain, 6 sites)")
    print(f"{'chains x sweeps':>18} {'numpy':>12} {'compiled':>12} {'speedup':>8}")
    lat = build_lattice(1, [6])
    model = kac_potential(lat, 0.1)
    rng = np.random.default_rng(1)
    for chains, sweeps in ((32, 500), (64, 1000)):
        X0 = rng.standard_normal((chains, 6))
        normals = rng.standard_normal((sweeps, 6, chains))
        logu = np.log(rng.random((sweeps, 6, chains)))

        def run(force):
            X = X0.copy()
            kernels.metropolis_block(model, X, normals, logu, 2.4, 10,
                                     force_numpy=force)

        t_np = timeit(lambda: run(True), 3)
        if not kernels.COMPILED:
            print(f"{chains}x{sweeps}: numpy {t_np*1e3:9.1f} ms "
                  "(extension not built)")
            continue
        t_c = timeit(lambda: run(False), 3)
        updates = chains * sweeps * 6
        print(f"{f'{chains} x {sweeps}':>18} {t_np*1e3:9.1f} ms "
              f"{t_c*1e3:9.1f} ms {t_np/t_c:7.1f}x   "
              f"({updates/t_c/1e6:.0f}M updates/s compiled)")


if __name__ == "__main__":
    print(f"backend selected at import: {kernels.backend()}\n")
    bench_stencil()
    bench_metropolis()
