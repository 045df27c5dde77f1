"""Time the numba kernels against the pure-numpy fallback.

    python3 benchmarks/bench_kernels.py [--rows 20000] [--trees 20] [--repeat 3]

Both backends are run on identical inputs; the script also checks that their
outputs agree bit-for-bit before reporting timings.
"""

import argparse
import time

import numpy as np

from hetfx.ensemble import PackedTrees
from hetfx.kernels import backend_module


def _best(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=20000)
    p.add_argument("--features", type=int, default=12)
    p.add_argument("--trees", type=int, default=20)
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    n, d = args.rows, args.features
    x = rng.normal(size=(n, d))
    w = rng.integers(0, 2, size=n).astype(np.int64)
    y = 0.1 * (x[:, 0] > 0) * w + rng.normal(size=n)
    wt = w - 0.5
    rows = np.arange(0, n, 2, dtype=np.int64)
    codes = np.arange(n, dtype=np.int64) % 200
    in_tree = rng.uniform(size=(args.trees, 200)) < 0.5
    group = np.arange(args.trees, dtype=np.int64) % 4

    jit = backend_module("numba")
    # compile outside the timed region
    jit.grow_tree(x[:200], np.arange(100, dtype=np.int64), True, y, wt, w, 5, 0.05, -1, 4, np.uint64(1))

    results = {}
    for name in ("numba", "numpy"):
        k = backend_module(name)

        def grow():
            return [k.grow_tree(x, rows, True, y, wt, w, 5, 0.05, -1, 4, np.uint64(b)) for b in range(args.trees)]

        t_grow, trees = _best(grow, args.repeat)
        packed = PackedTrees.pack(trees)
        f, t, lft, rgt, off = packed.arrays()
        size = f.shape[0]
        stats = [np.ones(size), rng.normal(size=size), np.ones(size)] if name == "numba" else results["numba"][3]
        if name == "numba":
            k.predict_causal(x[:10], codes[:10], True, f, t, lft, rgt, off, *stats, in_tree, group, 4)
        t_pred, pred = _best(
            lambda: k.predict_causal(x, codes, True, f, t, lft, rgt, off, *stats, in_tree, group, 4), args.repeat
        )
        results[name] = (t_grow, t_pred, (trees, pred), stats)

    same_trees = all(
        all(np.array_equal(a, b) for a, b in zip(ta, tb))
        for ta, tb in zip(results["numba"][2][0], results["numpy"][2][0])
    )
    same_pred = all(
        np.array_equal(a, b, equal_nan=True) for a, b in zip(results["numba"][2][1], results["numpy"][2][1])
    )
    print(f"rows={n} features={d} trees={args.trees} (best of {args.repeat})")
    print(f"{'kernel':<16}{'numba s':>10}{'numpy s':>10}{'speedup':>10}")
    for label, i in (("grow_tree", 0), ("predict_causal", 1)):
        a, b = results["numba"][i], results["numpy"][i]
        print(f"{label:<16}{a:>10.3f}{b:>10.3f}{b / a:>9.1f}x")
    print(f"identical trees: {same_trees}; identical predictions: {same_pred}")


if __name__ == "__main__":
    main()
