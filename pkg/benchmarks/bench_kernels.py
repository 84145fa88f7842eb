#!/usr/bin/env python3
"""Compare the convolution backends (compiled extension vs numpy fallback).

Times forward and backward passes of the 3x3 dilated convolution on the
layer shapes the models actually use, and reports GFLOP/s per backend.

    python3 benchmarks/bench_kernels.py [--batch 16] [--hw 64] [--repeats 3]
"""

import argparse
import time

import numpy as np

from r3denoise import kernels

# (label, in_ch, out_ch, dilation) as they appear in the layer schedule
CASES = [
    ("encoder.0 (1->64, d1)", 1, 64, 1),
    ("encoder.1 (64->64, d2)", 64, 64, 2),
    ("encoder.3 (64->64, d4)", 64, 64, 4),
    ("policy.2 (64->27, d1)", 64, 27, 1),
    ("value.2 (64->1, d1)", 64, 1, 1),
]


def time_call(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--hw", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    print(f"backends available: {kernels.available_backends()}")
    print(f"batch {args.batch}, spatial {args.hw}x{args.hw}, best of {args.repeats}\n")
    header = f"{'case':26s} {'dir':4s}" + "".join(
        f" {name + ' GF/s':>14s}" for name in kernels.available_backends())
    print(header)
    print("-" * len(header))

    for label, cin, cout, dil in CASES:
        x = rng.normal(size=(args.batch, cin, args.hw, args.hw))
        w = rng.normal(size=(cout, cin, 3, 3)) * 0.1
        b = rng.normal(size=cout)
        dy = rng.normal(size=(args.batch, cout, args.hw, args.hw))
        flops_fwd = 2.0 * args.batch * cout * cin * 9 * args.hw * args.hw
        flops_bwd = 2.0 * flops_fwd  # dx and dw each cost about one forward

        row_f, row_b = [], []
        for name in kernels.available_backends():
            with kernels.use_backend(name):
                tf = time_call(lambda: kernels.conv2d_forward(x, w, b, dil), args.repeats)
                tb = time_call(lambda: kernels.conv2d_backward(x, w, dy, dil), args.repeats)
            row_f.append(flops_fwd / tf / 1e9)
            row_b.append(flops_bwd / tb / 1e9)
        print(f"{label:26s} {'fwd':4s}" + "".join(f" {v:14.2f}" for v in row_f))
        print(f"{'':26s} {'bwd':4s}" + "".join(f" {v:14.2f}" for v in row_b))

    # cross-check while we're here: both backends must agree
    x = rng.normal(size=(2, 3, 17, 13))
    w = rng.normal(size=(5, 3, 3, 3))
    b = rng.normal(size=5)
    dy = rng.normal(size=(2, 5, 17, 13))
    outs, grads = [], []
    for name in kernels.available_backends():
        with kernels.use_backend(name):
            outs.append(kernels.conv2d_forward(x, w, b, 2))
            grads.append(kernels.conv2d_backward(x, w, dy, 2))
    worst = 0.0
    for o in outs[1:]:
        worst = max(worst, float(np.abs(o - outs[0]).max()))
    for g in grads[1:]:
        for a, bb in zip(g, grads[0]):
            worst = max(worst, float(np.abs(a - bb).max()))
    print(f"\nmax cross-backend difference: {worst:.3e}")


if __name__ == "__main__":
    main()
