"""Compare the compiled kernels with the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Times the Jacobi SVD sweep on bank-sized covariances and the RBF kernel sum
used by the MMD diagnostic, and checks that both backends agree.
"""

import argparse
import time

import numpy as np

from drift_tune import _fallback
from drift_tune._backend import compiled_available


def _best_of(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_jacobi(impl, d, repeat, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((4 * d, d))
    h = a.T @ a

    def run():
        W = np.array(h.T, order="C")
        V = np.eye(d)
        impl.jacobi_rotate(W, V, 1e-15, 80, 0.0)
        return np.sort(np.sqrt(np.einsum("ij,ij->i", W, W)))[::-1]

    return _best_of(run, repeat)


def bench_rbf(impl, n, d, repeat, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, d)) + 0.5
    return _best_of(lambda: impl.rbf_kernel_sum(x, y, 0.1, False), repeat)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not compiled_available():
        print("compiled kernels are not built; only the fallback can run")
        return
    from drift_tune import _kernels

    print(f"{'kernel':<10}{'size':>12}{'compiled s':>14}{'python s':>14}{'speedup':>10}{'max diff':>12}")
    for d in (16, 32, 64):
        tc, sc = bench_jacobi(_kernels, d, args.repeat, d)
        tp, sp = bench_jacobi(_fallback, d, args.repeat, d)
        diff = np.max(np.abs(sc - sp)) / sc[0]
        print(f"{'jacobi':<10}{f'd={d}':>12}{tc:>14.5f}{tp:>14.5f}{tp / tc:>10.1f}{diff:>12.1e}")
    for n in (256, 512, 1024):
        tc, vc = bench_rbf(_kernels, n, 16, args.repeat, n)
        tp, vp = bench_rbf(_fallback, n, 16, args.repeat, n)
        diff = abs(vc - vp) / abs(vc)
        print(f"{'rbf_sum':<10}{f'n={n}':>12}{tc:>14.5f}{tp:>14.5f}{tp / tc:>10.1f}{diff:>12.1e}")


if __name__ == "__main__":
    main()
