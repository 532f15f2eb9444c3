"""Time the compiled Hungarian kernel against the pure-Python fallback.

    python3 benchmarks/bench_hungarian.py --sizes 8 24 64 --repeats 20
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from langdet.matching import hungarian

try:
    from langdet import _hungarian  # noqa: F401
    HAVE_EXT = True
except ImportError:
    HAVE_EXT = False


def time_backend(backend, mats, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        for c in mats:
            hungarian(c, backend=backend)
        best = min(best, time.perf_counter() - t)
    return best / len(mats)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 24, 64, 128])
    ap.add_argument("--rect", type=float, default=1.5, help="columns = rect * rows")
    ap.add_argument("--matrices", type=int, default=10)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"{'rows x cols':>12} {'python (ms)':>12} {'compiled (ms)':>14} {'speedup':>8}")
    for n in args.sizes:
        m = int(round(n * args.rect))
        mats = [rng.random((n, m)) for _ in range(args.matrices)]
        if HAVE_EXT:
            for c in mats:  # both backends must agree before timing means anything
                a, b = hungarian(c, backend="python"), hungarian(c, backend="compiled")
                assert a.pairs == b.pairs
        t_py = time_backend("python", mats, args.repeats)
        t_c = time_backend("compiled", mats, args.repeats) if HAVE_EXT else float("nan")
        print(f"{n:>5} x {m:<5} {1e3 * t_py:12.3f} {1e3 * t_c:14.4f} {t_py / t_c:8.1f}x")
    if not HAVE_EXT:
        print("compiled extension not built; reinstall with Cython available")


if __name__ == "__main__":
    main()
