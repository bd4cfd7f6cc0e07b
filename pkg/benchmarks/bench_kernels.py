"""Compare the compiled kernels with the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Timings are medians over ``--repeat`` calls on the shapes met during
training and evaluation (10 queries against up to 4 ground-truth spans for
matching, a few hundred ranked windows for AP).
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from amr import _fallback

try:
    from amr import _kernels
except ImportError:
    _kernels = None


def _spans(rng, n, length=75):
    s = rng.integers(0, length - 1, n)
    e = s + rng.integers(1, 20, n)
    return np.stack([s, np.minimum(e, length)], axis=1).astype(np.float64)


def cases(rng):
    preds, gts = _spans(rng, 10), _spans(rng, 4)
    many, ranked = _spans(rng, 300), rng.random(300)
    cost = rng.random((10, 10))
    return {
        "assignment 10x10": lambda m: m.linear_sum_assignment(cost),
        "iou 10x4": lambda m: m.iou_matrix(preds, gts),
        "giou 10x4": lambda m: m.giou_matrix(preds, gts),
        "AP 300 windows": lambda m: m.greedy_average_precision(ranked, many, gts, 0.5),
    }


def median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'kernel':18s} {'python (us)':>12s} {'cython (us)':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        py = median_time(lambda: fn(_fallback), args.repeat) * 1e6
        if _kernels is None:
            print(f"{name:18s} {py:12.1f} {'-':>12s} {'-':>8s}")
            continue
        cy = median_time(lambda: fn(_kernels), args.repeat) * 1e6
        print(f"{name:18s} {py:12.1f} {cy:12.1f} {py / cy:7.1f}x")


if __name__ == "__main__":
    main()
