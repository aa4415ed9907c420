"""Time the numba kernels against their pure-numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best wall time of ``repeat`` calls after one warm-up
call (which also triggers JIT compilation) and checks the two outputs agree.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from alphamine import _kernels as K


def cases(rng):
    panel = rng.standard_normal((50, 400))
    ties = rng.integers(0, 20, (50, 400)).astype(float)
    xs = np.sort(rng.integers(0, 200, 20_000).astype(float))
    g, h = rng.standard_normal(20_000), rng.uniform(0, 0.25, 20_000)
    return [
        ("rank_rows 50x400 ties", K.rank_rows_numpy, K.rank_rows_numba, (ties,)),
        ("rank_rows 400x50", K.rank_rows_numpy, K.rank_rows_numba, (panel.T.copy(),)),
        ("rolling_mean k=20", K.rolling_mean_numpy, K.rolling_mean_numba, (panel, 20)),
        ("rolling_std k=20", K.rolling_std_numpy, K.rolling_std_numba, (panel, 20)),
        ("ema_rows alpha=2/13", K.ema_rows_numpy, K.ema_rows_numba, (panel, 2 / 13)),
        ("split_scan n=20000", K.split_scan_numpy, K.split_scan_numba, (xs, g, h, 1.0, 1e-3)),
    ]


def best_time(fn, args, repeat):
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}  agree")
    for name, f_np, f_nb, fargs in cases(rng):
        a, b = f_np(*fargs), f_nb(*fargs)
        agree = np.allclose(np.asarray(a, float), np.asarray(b, float), equal_nan=True, rtol=1e-9, atol=1e-12)
        t_np = best_time(f_np, fargs, args.repeat) * 1e3
        t_nb = best_time(f_nb, fargs, args.repeat) * 1e3
        print(f"{name:<24}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x  {agree}")


if __name__ == "__main__":
    main()
