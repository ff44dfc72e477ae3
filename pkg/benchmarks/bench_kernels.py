"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel and input size with the best-of-N wall time of each
path and the speed-up. Both paths are checked for agreement before timing.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from metavi import _kernels as K


def _cases(rng):
    for n, d, k in ((2_000, 10, 20), (20_000, 400, 10), (120_000, 10, 1000)):
        values = rng.normal(size=(n, d))
        seg = rng.integers(0, k, n)
        yield f"segment_sum n={n} d={d} segs={k}", K.segment_sum_numpy, K.segment_sum_numba, (values, seg, k)
    for n in (10, 100):
        L = rng.uniform(1, 20, n)
        acc = rng.uniform(0.5, 9.0, n)
        yield f"rk4_descent n={n} dt=1e-4", K.rk4_descent_numpy, K.rk4_descent_numba, (L, acc, 1e-4)
    for n, d in ((200, 40), (800, 40)):
        X = rng.normal(size=(n, d))
        y = (X[:, 0] + rng.normal(size=n) > 0).astype(np.float64)
        yield f"logreg_fit n={n} d={d}", K.logreg_fit_numpy, K.logreg_fit_numba, (X, y, 1e-4, 0.5, 2000, 1e-6)


def _agree(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_agree(u, v) for u, v in zip(a, b))
    return bool(np.allclose(a, b, rtol=1e-8, atol=1e-9))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<40} {'numpy ms':>10} {'numba ms':>10} {'speed-up':>9}")
    for name, f_np, f_nb, call_args in _cases(rng):
        ref, got = f_np(*call_args), f_nb(*call_args)  # also triggers compilation
        if not _agree(ref, got):
            raise SystemExit(f"{name}: numba and numpy disagree")
        t_np = min(timeit.repeat(lambda: f_np(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<40} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
