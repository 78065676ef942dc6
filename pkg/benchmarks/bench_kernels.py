"""Compare the compiled and pure-numpy kernel backends.

Run:  python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from oneshot6d import kernels
from oneshot6d.kernels import py as pure


def timeit(fn, *args, repeat=20):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_splat(n=200_000, size=256):
    rng = np.random.default_rng(0)
    u = rng.integers(0, size, n)
    v = rng.integers(0, size, n)
    z = rng.uniform(0.5, 3.0, n)
    attrs = rng.uniform(0, 1, (n, 3))
    rows = [("zbuffer_splat (pure)", timeit(pure.zbuffer_splat, u, v, z, attrs, size, size))]
    if kernels.BACKEND == "cython":
        from oneshot6d.kernels import _impl

        rows.append(("zbuffer_splat (cython)", timeit(_impl.zbuffer_splat, u, v, z, attrs, size, size)))
    return rows


def bench_col2im(c=64, h=64, w=64, k=3, stride=1):
    pad = k // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    cols = np.random.default_rng(1).standard_normal((c * k * k, oh * ow))
    args = (cols, c, k, k, hp, wp, oh, ow, stride)
    rows = [("col2im_add (pure)", timeit(pure.col2im_add, *args))]
    if kernels.BACKEND == "cython":
        from oneshot6d.kernels import _impl

        rows.append(("col2im_add (cython)", timeit(_impl.col2im_add, *args)))
    return rows


def main():
    print(f"active backend: {kernels.BACKEND}")
    for name, secs in bench_splat() + bench_col2im():
        print(f"{name:26s} {secs * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
