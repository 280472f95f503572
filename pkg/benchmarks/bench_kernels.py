#!/usr/bin/env python3
"""Benchmark the compiled box kernels against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Covers the three hot loops (pairwise IoU, greedy NMS, greedy assignment) at
sizes typical of evaluating a wide-angle manifest. When the extension is not
built only the fallback column is reported.
"""

import argparse
import time

import numpy as np

from wideleaf import _kernels_py

try:
    from wideleaf import _kernels as compiled
except ImportError:
    compiled = None


def random_boxes(rng, n, field=600.0):
    w = rng.uniform(8.0, 120.0, size=n)
    h = rng.uniform(8.0, 120.0, size=n)
    x0 = rng.uniform(0.0, field, size=n)
    y0 = rng.uniform(0.0, field, size=n)
    return np.ascontiguousarray(np.stack([x0, y0, x0 + w, y0 + h], axis=1))


def bench(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    a = random_boxes(rng, 1000)
    b = random_boxes(rng, 1000)
    nms_boxes = random_boxes(rng, 5000, field=2000.0)
    order = np.argsort(-rng.uniform(size=5000))
    nms_sorted = np.ascontiguousarray(nms_boxes[order])
    iou_matrix = np.ascontiguousarray(_kernels_py.pairwise_iou(
        random_boxes(rng, 800), random_boxes(rng, 800)))

    cases = [
        ("pairwise_iou 1000x1000", lambda impl: impl.pairwise_iou(a, b)),
        ("nms_keep 5000 @0.45", lambda impl: impl.nms_keep(nms_sorted, 0.45)),
        ("greedy_assign 800x800 @0.5", lambda impl: impl.greedy_assign(iou_matrix, 0.5)),
    ]

    header = f"{'kernel':28} {'python':>10}"
    if compiled is not None:
        header += f" {'compiled':>10} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, call in cases:
        py_time = bench(lambda: call(_kernels_py), args.repeat)
        line = f"{name:28} {py_time * 1e3:9.2f}ms"
        if compiled is not None:
            c_time = bench(lambda: call(compiled), args.repeat)
            line += f" {c_time * 1e3:9.2f}ms {py_time / c_time:8.1f}x"
        print(line)
    if compiled is None:
        print("\ncompiled kernels not built; showing the fallback only")


if __name__ == "__main__":
    main()
