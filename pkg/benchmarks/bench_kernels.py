#!/usr/bin/env python3
"""Time the numba kernels against the pure-numpy fallbacks.

Runs each hot kernel (depthwise 3x3 conv forward/input-grad/kernel-grad,
GELU forward/backward) on shapes taken from the stage geometry of the small
and base model widths, and prints per-kernel speedups.

Usage: python benchmarks/bench_kernels.py [--iters N] [--dtype float32|float64]
"""

import argparse
import time

import numpy as np

from apvt import kernels


def time_call(fn, args, iters):
    fn(*args)  # warmup / jit compile
    t0 = time.perf_counter()
    for _ in range(iters):
        fn(*args)
    return (time.perf_counter() - t0) / iters


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args()
    dtype = np.dtype(args.dtype)

    if "numba" not in kernels._IMPLS:
        raise SystemExit("numba backend unavailable; nothing to compare "
                         "(unset APVT_BACKEND or install numba)")
    nb = kernels.implementations("numba")
    np_ = kernels.implementations("numpy")

    rng = np.random.default_rng(0)
    # (batch, channels, h, w) drawn from stage-1/stage-2 geometry at the
    # hidden (expansion x width) channel counts the conv-FFN actually sees
    conv_shapes = [(8, 256, 8, 8), (8, 512, 4, 4), (32, 256, 8, 8), (2, 512, 56, 56)]
    gelu_sizes = [2 ** 16, 2 ** 20]

    print(f"backend comparison, dtype={dtype.name}, iters={args.iters}")
    print(f"{'kernel':22} {'shape':>18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")

    for shape in conv_shapes:
        x = rng.standard_normal(shape).astype(dtype)
        k = rng.standard_normal((shape[1], 3, 3)).astype(dtype)
        g = rng.standard_normal(shape).astype(dtype)
        for name, a in (("dwconv2d_forward", (x, k)),
                        ("dwconv2d_input_grad", (g, k)),
                        ("dwconv2d_kernel_grad", (g, x))):
            t_np = time_call(np_[name], a, args.iters)
            t_nb = time_call(nb[name], a, args.iters)
            print(f"{name:22} {str(shape):>18} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} "
                  f"{t_np / t_nb:7.2f}x")

    for n in gelu_sizes:
        x = rng.standard_normal(n).astype(dtype)
        g = rng.standard_normal(n).astype(dtype)
        for name, a in (("gelu_forward", (x,)), ("gelu_backward", (x, g))):
            t_np = time_call(np_[name], a, args.iters)
            t_nb = time_call(nb[name], a, args.iters)
            print(f"{name:22} {f'({n},)':>18} {t_np * 1e3:10.3f} {t_nb * 1e3:10.3f} "
                  f"{t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
