"""Time the numba kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Both backends are called
directly, so the ``LSEOPE_DISABLE_NUMBA`` flag does not matter here.
"""
import argparse
import time

import numpy as np

from lseope import kernels
from lseope._accel import HAVE_NUMBA


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    if not HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1

    gen = np.random.default_rng(args.seed)
    shapes = [(10_000, 10), (1000, 1000), (100, 100_000)]
    cases = [("LSE", None), ("IPS_TR", 5.0), ("PM", 0.3), ("LS", 0.5)]
    print(f"{'kernel':8s} {'shape':>14s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for shape in shapes:
        w = gen.pareto(1.5, shape) + 0.01
        r = gen.uniform(0.0, 2.0, shape)
        pt = np.minimum(w * 0.1, 1.0)
        p0 = pt / w
        for name, param in cases:
            if name == "LSE":
                z = w * r
                f_np = lambda: kernels.lse_rows_numpy(z, 0.1)
                f_nb = lambda: kernels.lse_rows_numba(z, 0.1)
            else:
                code = kernels.KIND_CODES[name]
                extra = -1.0 if name == "PM" else 0.0
                f_np = lambda: kernels.separable_rows_numpy(code, w, r, pt, p0, param, extra)
                f_nb = lambda: kernels.separable_rows_numba(code, w, r, pt, p0, param, extra)
            diff = float(np.max(np.abs(f_np() - f_nb())))  # also warms up the jit
            t_np = best_of(f_np, args.repeats)
            t_nb = best_of(f_nb, args.repeats)
            print(f"{name:8s} {str(shape):>14s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f} {diff:11.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
