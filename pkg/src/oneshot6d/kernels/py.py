"""Pure-numpy reference implementations of the hot kernels."""

import numpy as np


def zbuffer_splat(u, v, z, attrs, height, width):
    """Splat points into pixel (v,u) keeping the nearest depth per pixel.

    u, v: (N,) int pixel coordinates (may fall outside the image; skipped)
    z: (N,) positive depths; attrs: (N,C) per-point attributes.
    Returns (image (H,W,C), depth (H,W), mask (H,W) bool).
    """
    u = np.asarray(u, dtype=np.int64)
    v = np.asarray(v, dtype=np.int64)
    z = np.asarray(z, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    C = attrs.shape[1]
    image = np.zeros((height, width, C))
    depth = np.zeros((height, width))
    mask = np.zeros((height, width), dtype=bool)

    keep = (u >= 0) & (u < width) & (v >= 0) & (v < height)
    u, v, z, attrs = u[keep], v[keep], z[keep], attrs[keep]
    if u.size == 0:
        return image, depth, mask
    # sort far-to-near so the nearest point wins the final write
    order = np.argsort(-z, kind="stable")
    flat = v[order] * width + u[order]
    image.reshape(-1, C)[flat] = attrs[order]
    depth.reshape(-1)[flat] = z[order]
    mask.reshape(-1)[flat] = True
    return image, depth, mask


def col2im_add(cols, c_in, kh, kw, h_pad, w_pad, h_out, w_out, stride):
    """Scatter-add im2col columns back into a padded image gradient.

    cols: (c_in*kh*kw, h_out*w_out). Returns (c_in, h_pad, w_pad).
    """
    cols = np.asarray(cols, dtype=np.float64).reshape(c_in, kh, kw, h_out, w_out)
    out = np.zeros((c_in, h_pad, w_pad))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + h_out * stride : stride, j : j + w_out * stride : stride] += cols[
                :, i, j
            ]
    return out
