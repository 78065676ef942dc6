# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; mirrors kernels/py.py exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def zbuffer_splat(u, v, z, attrs, int height, int width):
    cdef cnp.int64_t[::1] uu = np.ascontiguousarray(u, dtype=np.int64)
    cdef cnp.int64_t[::1] vv = np.ascontiguousarray(v, dtype=np.int64)
    cdef double[::1] zz = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, ::1] aa = np.ascontiguousarray(attrs, dtype=np.float64)
    cdef int n = uu.shape[0]
    cdef int C = aa.shape[1]

    image_np = np.zeros((height, width, C))
    depth_np = np.zeros((height, width))
    mask_np = np.zeros((height, width), dtype=np.uint8)
    cdef double[:, :, ::1] image = image_np
    cdef double[:, ::1] depth = depth_np
    cdef cnp.uint8_t[:, ::1] mask = mask_np

    cdef int k, c
    cdef cnp.int64_t x, y
    for k in range(n):
        x = uu[k]
        y = vv[k]
        if x < 0 or x >= width or y < 0 or y >= height:
            continue
        if mask[y, x] and depth[y, x] <= zz[k]:
            continue
        depth[y, x] = zz[k]
        mask[y, x] = 1
        for c in range(C):
            image[y, x, c] = aa[k, c]
    return image_np, depth_np, mask_np.astype(bool)


def col2im_add(cols, int c_in, int kh, int kw, int h_pad, int w_pad,
               int h_out, int w_out, int stride):
    cdef double[:, ::1] cc = np.ascontiguousarray(cols, dtype=np.float64)
    out_np = np.zeros((c_in, h_pad, w_pad))
    cdef double[:, :, ::1] out = out_np
    cdef int c, i, j, oy, ox, row
    for c in range(c_in):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                for oy in range(h_out):
                    for ox in range(w_out):
                        out[c, oy * stride + i, ox * stride + j] += cc[row, oy * w_out + ox]
    return out_np
