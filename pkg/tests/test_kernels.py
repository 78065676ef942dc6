"""Backend-agnostic contracts for the rasterization and col2im kernels, plus
agreement between the compiled and pure implementations when both exist."""

import numpy as np
import pytest

from oneshot6d import kernels
from oneshot6d.kernels import py as pure


def splat_reference(us, vs, zs, colors, h, w):
    """Per-pixel nearest-depth reduction, trivially slow."""
    c = colors.shape[1]
    img = np.zeros((h, w, c))
    depth = np.full((h, w), np.inf)
    mask = np.zeros((h, w), dtype=bool)
    for u, v, z, col in zip(us, vs, zs, colors):
        if 0 <= u < w and 0 <= v < h and z < depth[v, u]:
            depth[v, u] = z
            img[v, u] = col
            mask[v, u] = True
    return img, depth, mask


def random_splat_case(seed, n=500, h=16, w=16):
    rng = np.random.default_rng(seed)
    us = rng.integers(-2, w + 2, n)
    vs = rng.integers(-2, h + 2, n)
    zs = rng.uniform(0.5, 3.0, n)
    colors = rng.uniform(0, 1, (n, 3))
    return us, vs, zs, colors, h, w


@pytest.mark.parametrize("impl", [kernels.zbuffer_splat, pure.zbuffer_splat])
def test_splat_matches_reference(impl):
    for seed in range(5):
        us, vs, zs, colors, h, w = random_splat_case(seed)
        img, depth, mask = impl(us, vs, zs, colors, h, w)
        rimg, rdepth, rmask = splat_reference(us, vs, zs, colors, h, w)
        assert np.array_equal(mask, rmask)
        assert np.allclose(np.where(np.isfinite(depth), depth, 0),
                           np.where(np.isfinite(rdepth), rdepth, 0))
        assert np.allclose(img, rimg)


def test_splat_nearest_wins_on_collision():
    us = np.array([3, 3]); vs = np.array([4, 4])
    zs = np.array([2.0, 1.0])
    colors = np.array([[1.0, 0.0], [0.0, 1.0]])
    img, depth, mask = kernels.zbuffer_splat(us, vs, zs, colors, 8, 8)
    assert depth[4, 3] == 1.0
    assert np.allclose(img[4, 3], [0.0, 1.0])


def test_splat_empty_input():
    img, depth, mask = kernels.zbuffer_splat(
        np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), np.zeros((0, 3)), 4, 4
    )
    assert not mask.any()


def col2im_reference(cols, c, kh, kw, h_pad, w_pad, oh, ow, stride):
    out = np.zeros((c, h_pad, w_pad))
    col = cols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            for a in range(oh):
                for b in range(ow):
                    out[:, a * stride + i, b * stride + j] += col[:, i, j, a, b]
    return out


@pytest.mark.parametrize("impl", [kernels.col2im_add, pure.col2im_add])
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
def test_col2im_matches_reference(impl, stride, pad):
    rng = np.random.default_rng(0)
    c, h, w, kh, kw = 2, 7, 6, 3, 3
    h_pad, w_pad = h + 2 * pad, w + 2 * pad
    oh = (h_pad - kh) // stride + 1
    ow = (w_pad - kw) // stride + 1
    cols = rng.standard_normal((c * kh * kw, oh * ow))
    got = impl(cols, c, kh, kw, h_pad, w_pad, oh, ow, stride)
    ref = col2im_reference(cols, c, kh, kw, h_pad, w_pad, oh, ow, stride)
    assert np.allclose(got, ref, atol=1e-12)


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled backend not built")
def test_backends_agree_exactly():
    from oneshot6d.kernels import _impl

    us, vs, zs, colors, h, w = random_splat_case(7, n=2000)
    a = _impl.zbuffer_splat(us, vs, zs, colors, h, w)
    b = pure.zbuffer_splat(us, vs, zs, colors, h, w)
    for x, y in zip(a, b):
        fx = np.where(np.isfinite(x), x, -1) if x.dtype.kind == "f" else x
        fy = np.where(np.isfinite(y), y, -1) if y.dtype.kind == "f" else y
        assert np.array_equal(fx, fy)
