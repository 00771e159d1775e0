#!/usr/bin/env python3
"""Compare the jit-compiled kernels against their pure-numpy fallbacks.

Run:  python benchmarks/bench_kernels.py [--reps 30]

The same comparison applies end to end: set SEMDIFF_NUMBA=0 to run the whole
package on the numpy path. GEMM-heavy work (convolutions) goes through BLAS
either way and is benchmarked separately at the bottom.
"""

import argparse
import time

import numpy as np

from semdiff.kernels import numba_impl, numpy_impl


def timeit(fn, *args, reps=30):
    fn(*args)  # warm-up / jit compile
    t0 = time.perf_counter()
    for _ in range(reps):
        fn(*args)
    return (time.perf_counter() - t0) / reps * 1000.0


def row(name, t_nb, t_np):
    speed = t_np / t_nb if t_nb > 0 else float("inf")
    print(f"{name:<42} numba {t_nb:8.3f} ms   numpy {t_np:8.3f} ms   x{speed:4.1f}")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--reps", type=int, default=30)
    args = parser.parse_args()
    reps = args.reps
    rng = np.random.default_rng(0)

    print(f"{'kernel':<42} {'jit':>14} {'fallback':>16}")
    print("-" * 84)

    for b, c, h, w, groups in [(8, 32, 32, 32, 8), (8, 192, 16, 16, 8)]:
        x = rng.normal(size=(b, c, h, w)).astype(np.float32)
        gamma = np.ones(c, np.float32)
        beta = np.zeros(c, np.float32)
        dy = rng.normal(size=x.shape).astype(np.float32)
        t_nb = timeit(numba_impl.group_norm_fwd, x, gamma, beta, groups, 1e-5, reps=reps)
        t_np = timeit(numpy_impl.group_norm_fwd, x, gamma, beta, groups, 1e-5, reps=reps)
        row(f"group_norm_fwd [{b},{c},{h},{w}]", t_nb, t_np)
        _, xhat, rstd = numpy_impl.group_norm_fwd(x, gamma, beta, groups, 1e-5)
        t_nb = timeit(numba_impl.group_norm_bwd, dy, xhat, gamma, rstd, groups, reps=reps)
        t_np = timeit(numpy_impl.group_norm_bwd, dy, xhat, gamma, rstd, groups, reps=reps)
        row(f"group_norm_bwd [{b},{c},{h},{w}]", t_nb, t_np)

    n = 800_000
    p = rng.normal(size=n).astype(np.float32)
    g = rng.normal(size=n).astype(np.float32)
    m = np.zeros(n, np.float32)
    v = np.zeros(n, np.float32)
    t_nb = timeit(numba_impl.adam_step, p.copy(), g, m.copy(), v.copy(),
                  1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001, reps=reps)
    t_np = timeit(numpy_impl.adam_step, p.copy(), g, m.copy(), v.copy(),
                  1e-4, 0.9, 0.999, 1e-8, 0.1, 0.001, reps=reps)
    row(f"adam_step [{n}]", t_nb, t_np)

    mask = rng.integers(0, 5, (256, 256)).astype(np.uint8)
    row("label_edges [256x256]",
        timeit(numba_impl.label_edges, mask, reps=reps),
        timeit(numpy_impl.label_edges, mask, reps=reps))

    blob = (rng.random((256, 256)) > 0.5).astype(np.uint8)
    offs = np.array([(dy_, dx_) for dy_ in range(-3, 4) for dx_ in range(-3, 4)
                     if dy_ * dy_ + dx_ * dx_ <= 9], dtype=np.int64)
    row("binary_dilate r3 [256x256]",
        timeit(numba_impl.binary_dilate, blob, offs, reps=reps),
        timeit(numpy_impl.binary_dilate, blob, offs, reps=reps))
    row("binary_erode r3 [256x256]",
        timeit(numba_impl.binary_erode, blob, offs, reps=reps),
        timeit(numpy_impl.binary_erode, blob, offs, reps=reps))

    row("connected_components [256x256]",
        timeit(numba_impl.connected_components, blob, reps=reps),
        timeit(numpy_impl.connected_components, blob, reps=reps))

    img = rng.random((512, 512))
    row("bilinear_resize 512->256",
        timeit(numba_impl.bilinear_resize, img, 256, 256, reps=reps),
        timeit(numpy_impl.bilinear_resize, img, 256, 256, reps=reps))
    labels = rng.integers(0, 17, (512, 512)).astype(np.uint8)
    row("nearest_resize 512->256",
        timeit(numba_impl.nearest_resize, labels, 256, 256, reps=reps),
        timeit(numpy_impl.nearest_resize, labels, 256, 256, reps=reps))

    k = np.exp(-np.linspace(-2.5, 2.5, 11) ** 2)
    k /= k.sum()
    a = rng.random((256, 256))
    row("sepconv_valid 11px [256x256]",
        timeit(numba_impl.sepconv_valid, a, k, reps=reps),
        timeit(numpy_impl.sepconv_valid, a, k, reps=reps))

    # context: the training hot path is BLAS GEMM regardless of backend
    print("-" * 84)
    x2d = rng.normal(size=(8192, 288)).astype(np.float32)
    w2d = rng.normal(size=(288, 32)).astype(np.float32)
    t = timeit(lambda a_, b_: a_ @ b_, x2d, w2d, reps=reps)
    gf = 2 * 8192 * 288 * 32 / (t / 1000) / 1e9
    print(f"{'conv-shaped GEMM 8192x288x32 (BLAS)':<42} {t:8.3f} ms   ({gf:.0f} GFLOP/s)")


if __name__ == "__main__":
    main()
