#!/usr/bin/env python3
"""Benchmark the two bilinear-warp backends and cross-check their outputs.

The compiled kernel and the pure-numpy fallback are required to produce
bit-identical results; this script times both on the same workload and
verifies that equality on every sample.

Usage:
    python benchmarks/bench_warp.py [--side 32] [--channels 3] [--warps 2000]
"""

import argparse
import sys
import time

import numpy as np

from robometer import transforms
from robometer._rng import Stream


def bench(backend: str, images, matrices, repeats: int) -> tuple:
    best = float("inf")
    outputs = None
    for _ in range(repeats):
        start = time.perf_counter()
        outputs = [
            transforms.warp_bilinear(img, m, backend=backend)
            for img, m in zip(images, matrices)
        ]
        best = min(best, time.perf_counter() - start)
    return best, outputs


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--side", type=int, default=32, help="square image side")
    parser.add_argument("--channels", type=int, default=3)
    parser.add_argument("--warps", type=int, default=2000, help="warps per timing pass")
    parser.add_argument("--repeats", type=int, default=3,
                        help="timing passes; the best is reported")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if transforms.WARP_BACKEND != "compiled":
        print("compiled backend unavailable; nothing to compare", file=sys.stderr)
        return 1

    rng = np.random.default_rng(args.seed)
    stream = Stream(args.seed)
    images = [
        rng.random((args.side, args.side, args.channels), dtype=np.float32)
        for _ in range(args.warps)
    ]
    matrices = []
    for _ in range(args.warps):
        spec = transforms.sample_spatial(stream, args.side, args.side)
        matrices.append(transforms.affine_matrix(spec, args.side, args.side))

    results = {}
    for backend in ("compiled", "numpy"):
        seconds, outputs = bench(backend, images, matrices, args.repeats)
        results[backend] = (seconds, outputs)
        rate = args.warps / seconds
        print(f"{backend:9s} {seconds * 1e3:8.1f} ms for {args.warps} warps "
              f"({rate:9.0f} warps/s)")

    mismatches = sum(
        not np.array_equal(a, b)
        for a, b in zip(results["compiled"][1], results["numpy"][1])
    )
    speedup = results["numpy"][0] / results["compiled"][0]
    print(f"speedup   {speedup:8.2f}x (compiled over numpy)")
    print(f"bit-identical outputs: {args.warps - mismatches}/{args.warps}")
    if mismatches:
        print("BACKENDS DISAGREE", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
