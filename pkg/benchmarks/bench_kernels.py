#!/usr/bin/env python3
"""Time the numba and numpy image kernels side by side.

Usage::

    python benchmarks/bench_kernels.py [--size 16] [--channels 1] [--runs 2000]

The first numba call of each kernel includes JIT compilation and is timed
separately as warm-up. A final section times a full augmented batch of 32
glyphs under whichever backend ``METAAUG_NUMBA`` selects.
"""
import argparse
import time

import numpy as np

from metaaug import augment, kernels
from metaaug.augment import TransformSpec
from metaaug.data import make_rng


def timeit(fn, args, runs):
    t0 = time.perf_counter()
    for _ in range(runs):
        fn(*args)
    return (time.perf_counter() - t0) / runs * 1e6  # microseconds


def bench(size, channels, runs):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (size, size, channels))
    q = rng.integers(0, 256, (size, size, channels)).astype(np.int64)
    theta = np.deg2rad(17.0)
    inv = np.array([[np.cos(theta), np.sin(theta), 0.5], [-np.sin(theta), np.cos(theta), -1.0]])
    center = np.array([(size - 1) / 2, (size - 1) / 2])

    cases = [
        ("warp_affine", kernels.warp_affine_numpy, kernels.warp_affine_numba, (img, inv, center)),
        ("smooth3x3", kernels.smooth3x3_numpy, kernels.smooth3x3_numba, (img,)),
        ("equalize", kernels.equalize_numpy, kernels.equalize_numba, (q,)),
    ]
    print(f"image {size}x{size}x{channels}, {runs} runs per kernel")
    print(f"{'kernel':<12} {'numpy us':>10} {'numba us':>10} {'speedup':>8} {'jit s':>7} {'max |diff|':>11}")
    for name, f_np, f_nb, args in cases:
        if f_nb is None:
            print(f"{name:<12} numba not installed")
            continue
        t0 = time.perf_counter()
        ref_nb = f_nb(*args)
        jit = time.perf_counter() - t0
        diff = float(np.max(np.abs(np.asarray(ref_nb, float) - np.asarray(f_np(*args), float))))
        t_np = timeit(f_np, args, runs)
        t_nb = timeit(f_nb, args, runs)
        print(f"{name:<12} {t_np:10.1f} {t_nb:10.1f} {t_np / t_nb:8.1f} {jit:7.2f} {diff:11.2e}")


def bench_batch(runs):
    rng = make_rng(0, "bench")
    images = rng.uniform(0, 1, (32, 16, 16, 1))
    specs = [TransformSpec(int(rng.integers(1, 15)), int(rng.integers(1, 15)),
                           float(rng.uniform(0, 10)), float(rng.uniform(0, 10))) for _ in range(32)]
    augment.augment_batch(images, specs, rng)
    t0 = time.perf_counter()
    for _ in range(runs):
        augment.augment_batch(images, specs, rng)
    per = (time.perf_counter() - t0) / runs * 1e3
    print(f"augment_batch(32 glyphs) with backend={kernels.backend()}: {per:.2f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=16)
    ap.add_argument("--channels", type=int, default=1)
    ap.add_argument("--runs", type=int, default=2000)
    args = ap.parse_args()
    bench(args.size, args.channels, args.runs)
    bench(64, 3, max(1, args.runs // 10))
    bench_batch(max(1, args.runs // 20))


if __name__ == "__main__":
    main()
