#!/usr/bin/env python3
"""Time the numba and numpy convolution kernels on the shapes the model uses.

    python3 benchmarks/bench_kernels.py [--repeat 50]

Numba compilation happens in a warm-up call and is excluded from the timings.
"""

import argparse
import timeit

import numpy as np

from twincap import _kernels as K

# name -> (kind, x shape, w shape)
CASES = {
    "pfeb conv1d 64->64 k3": ("conv1d", (16, 64, 8), (64, 64, 3)),
    "cab conv1d 1->1 k9": ("conv1d", (128, 1, 64), (1, 1, 9)),
    "cfb conv2d 3->1 7x7": ("conv2d", (16, 3, 8, 64), (1, 3, 7, 7)),
}


def bench(kind, xs, ws, repeat, rng):
    x = rng.standard_normal(xs).astype(np.float32)
    w = rng.standard_normal(ws).astype(np.float32)
    g = rng.standard_normal((xs[0], ws[0]) + xs[2:]).astype(np.float32)
    rows = {}
    for impl in ("numpy", "numba"):
        fwd = getattr(K, f"{kind}_forward_{impl}")
        bwd = getattr(K, f"{kind}_backward_{impl}")
        fwd(x, w)
        bwd(g, x, w)
        tf = timeit.timeit(lambda: fwd(x, w), number=repeat) / repeat
        tb = timeit.timeit(lambda: bwd(g, x, w), number=repeat) / repeat
        rows[impl] = (tf * 1e3, tb * 1e3)
    err = np.abs(K.__dict__[f"{kind}_forward_numpy"](x, w) - K.__dict__[f"{kind}_forward_numba"](x, w)).max()
    return rows, err


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'case':<24}{'impl':<7}{'fwd ms':>9}{'bwd ms':>9}")
    for name, (kind, xs, ws) in CASES.items():
        rows, err = bench(kind, xs, ws, args.repeat, rng)
        for impl, (tf, tb) in rows.items():
            print(f"{name:<24}{impl:<7}{tf:9.3f}{tb:9.3f}")
        print(f"{'':<24}max |numpy - numba| = {err:.2e}")


if __name__ == "__main__":
    main()
