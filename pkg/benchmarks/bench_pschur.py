"""Benchmark the periodic Schur kernels: numba-compiled vs interpreted numpy.

The decomposition is the hot spot of Floquet computations (cycles of a few
hundred factors at up to ~100 unknowns). Run:

    python benchmarks/bench_pschur.py            # compiled kernels
    OCC_NUMBA=0 python benchmarks/bench_pschur.py  # interpreted fallback

and compare the reported timings. The eigenvalue checksum printed at the end
must agree between the two runs to ~1e-10.
"""

import time

import numpy as np

from occ.pschur import USE_NUMBA, periodic_schur


def factor_cycle(rng, m, n, spread):
    mus = np.linspace(-spread, spread, n)
    A = np.zeros((m, n, n))
    for j in range(m):
        A[j] = np.diag(np.exp(mus)) + 0.02 * rng.standard_normal((n, n))
    return A


def run_case(m, n, spread, repeats=3):
    rng = np.random.default_rng(1234)
    A = factor_cycle(rng, m, n, spread)
    periodic_schur(A[: min(m, 8)])  # warm any compilation outside the timing
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        ps = periodic_schur(A)
        best = min(best, time.perf_counter() - t0)
    checksum = float(np.sum(np.sort(ps.log_abs)))
    return best, checksum


def main():
    mode = "numba" if USE_NUMBA else "numpy fallback"
    print(f"periodic_schur backend: {mode}")
    print(f"{'m':>5} {'n':>4} {'spread':>7} {'best [s]':>10} {'checksum':>18}")
    for m, n, spread in [(50, 8, 0.3), (200, 8, 0.5), (100, 24, 0.4),
                         (200, 42, 0.5), (100, 84, 0.5)]:
        t, chk = run_case(m, n, spread)
        print(f"{m:>5} {n:>4} {spread:>7.2f} {t:>10.3f} {chk:>18.10f}")


if __name__ == "__main__":
    main()
