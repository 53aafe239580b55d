"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--json out.json]

Timings are best-of-N wall times after one warm-up call (which also
triggers numba compilation).
"""
import argparse
import json
import time

import numpy as np

from layerjoule import _accel


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    for n, m in ((30, 64), (30, 4096), (200, 4096)):
        a, b = rng.uniform(0, 1, (n, 2)), rng.uniform(0, 1, (m, 2))
        yield (f"matern52 {n}x{m}", lambda a=a, b=b: _accel.matern52_cross_numpy(a, b, 0.4, 1.0),
               lambda a=a, b=b: _accel.matern52_cross_numba(a, b, 0.4, 1.0))
        yield (f"rbf {n}x{m}", lambda a=a, b=b: _accel.rbf_cross_numpy(a, b, 0.4, 1.0),
               lambda a=a, b=b: _accel.rbf_cross_numba(a, b, 0.4, 1.0))
    for n in (1_000, 100_000, 1_000_000):
        t = np.cumsum(rng.uniform(0.05, 0.15, n))
        p = rng.uniform(0, 15, n)
        yield (f"trace {n}", lambda t=t, p=p: _accel.net_energy_numpy(t, p, 2.0),
               lambda t=t, p=p: _accel.net_energy_numba(t, p, 2.0))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'case':<22} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, f_np, f_nb in cases(rng):
        t_np, t_nb = best_of(f_np, args.repeats), best_of(f_nb, args.repeats)
        rows.append({"case": name, "numpy_s": t_np, "numba_s": t_nb})
        print(f"{name:<22} {t_np * 1e3:>10.3f} {t_nb * 1e3:>10.3f} {t_np / t_nb:>7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
