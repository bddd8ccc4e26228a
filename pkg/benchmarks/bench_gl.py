#!/usr/bin/env python3
"""Benchmark the transport-loss solver backends (compiled vs pure numpy).

Usage: python benchmarks/bench_gl.py [--repeats N]

Times the same instances through both kernels and checks they agree.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from countforge._kernels import _gl_numpy  # noqa: E402

try:
    from countforge._kernels import _gl_cy
except ImportError:
    _gl_cy = None

from countforge.transport import cost_matrix, grid_coords  # noqa: E402


def make_instance(rng, h, w, m, sparse_mass):
    cells = grid_coords(h, w)
    pts = rng.uniform(0, 1, size=(m, 2))
    cost = cost_matrix(cells, pts, eta=0.6)
    a = rng.uniform(0, 0.08 if sparse_mass else 2.0, size=h * w)
    return cost, a


def time_solve(mod, cost, a, repeats):
    best = float("inf")
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = mod.solve(cost, a, 0.01, 0.5, 1000, 1e-7)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    if _gl_cy is None:
        print("compiled kernel not built (run `python setup.py build_ext --inplace`);")
        print("timing the numpy kernel only")

    rng = np.random.default_rng(0)
    cases = [
        ("tiny   6x4", 2, 3, 4, False),
        ("small 64x6", 8, 8, 6, False),
        ("demo  32x32 grid, m=6", 32, 32, 6, True),
        ("large 48x48 grid, m=12", 48, 48, 12, True),
    ]
    header = f"{'case':26} {'numpy':>12} {'cython':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, h, w, m, sparse in cases:
        cost, a = make_instance(rng, h, w, m, sparse)
        t_np, r_np = time_solve(_gl_numpy, cost, a, args.repeats)
        if _gl_cy is None:
            print(f"{name:26} {t_np * 1e3:10.3f} ms {'-':>12} {'-':>9}")
            continue
        t_cy, r_cy = time_solve(_gl_cy, cost, a, args.repeats)
        rel = abs(r_np[0] - r_cy[0]) / max(1.0, abs(r_np[0]))
        if rel > 1e-9:
            print(f"backend disagreement on {name}: {r_np[0]} vs {r_cy[0]}")
            return 1
        print(
            f"{name:26} {t_np * 1e3:10.3f} ms {t_cy * 1e3:9.3f} ms "
            f"{t_np / t_cy:8.2f}x"
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
