"""Local feature extraction (coarse stride-4 + fine stride-1 heads) and the
2D sinusoidal / 3D MLP positional encodings."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ad
from .errors import ShapeMismatch

COARSE_STRIDE = 4


@dataclass
class FeaturePyramid:
    coarse_flat: ad.Tensor  # (Hc*Wc, C_coarse)
    fine_flat: ad.Tensor  # (H*W, C_fine)
    coarse_shape: tuple  # (Hc, Wc)
    fine_shape: tuple  # (H, W)
    stride: int = COARSE_STRIDE


def init_feature_params(rng, c_in: int = 3, c_coarse: int = 64, c_fine: int = 32) -> dict:
    p = {}
    p["feat.c1.w"] = ad.parameter((32, c_in, 3, 3), rng)
    p["feat.c1.b"] = ad.parameter(np.zeros(32))
    p["feat.c2.w"] = ad.parameter((c_coarse, 32, 3, 3), rng)
    p["feat.c2.b"] = ad.parameter(np.zeros(c_coarse))
    p["feat.c3.w"] = ad.parameter((c_coarse, c_coarse, 3, 3), rng)
    p["feat.c3.b"] = ad.parameter(np.zeros(c_coarse))
    p["feat.c4.w"] = ad.parameter((c_coarse, c_coarse, 3, 3), rng)
    p["feat.c4.b"] = ad.parameter(np.zeros(c_coarse))
    p["feat.f1.w"] = ad.parameter((16, c_in, 3, 3), rng)
    p["feat.f1.b"] = ad.parameter(np.zeros(16))
    p["feat.f2.w"] = ad.parameter((c_fine, 16, 3, 3), rng)
    p["feat.f2.b"] = ad.parameter(np.zeros(c_fine))
    # 3-layer MLP for 3D positions: two nonlinear layers + linear output
    p["pe3.w1"] = ad.parameter((3, c_coarse), rng)
    p["pe3.b1"] = ad.parameter(np.zeros(c_coarse))
    p["pe3.w2"] = ad.parameter((c_coarse, c_coarse), rng)
    p["pe3.b2"] = ad.parameter(np.zeros(c_coarse))
    p["pe3.w3"] = ad.parameter((c_coarse, c_coarse), rng)
    p["pe3.b3"] = ad.parameter(np.zeros(c_coarse))
    return p


def extract(params: dict, image: np.ndarray) -> FeaturePyramid:
    """image (H,W,C) -> coarse (H/4,W/4,Cc) and fine (H,W,Cf) maps."""
    if image.ndim != 3:
        raise ShapeMismatch(f"image must be (H,W,C), got {image.shape}")
    h, w = image.shape[:2]
    if h % COARSE_STRIDE or w % COARSE_STRIDE:
        raise ShapeMismatch(f"image dims {h}x{w} not divisible by stride {COARSE_STRIDE}")
    x = ad.Tensor(np.ascontiguousarray(image.transpose(2, 0, 1)))
    c1 = ad.relu(ad.conv2d(x, params["feat.c1.w"], params["feat.c1.b"], stride=2))
    c2 = ad.relu(ad.conv2d(c1, params["feat.c2.w"], params["feat.c2.b"], stride=2))
    c3 = ad.relu(ad.conv2d(c2, params["feat.c3.w"], params["feat.c3.b"]))
    c4 = ad.conv2d(c3, params["feat.c4.w"], params["feat.c4.b"])
    f1 = ad.relu(ad.conv2d(x, params["feat.f1.w"], params["feat.f1.b"]))
    f2 = ad.conv2d(f1, params["feat.f2.w"], params["feat.f2.b"])
    hc, wc = h // COARSE_STRIDE, w // COARSE_STRIDE
    coarse = ad.reshape(ad.transpose(c4, (1, 2, 0)), (hc * wc, -1))
    fine = ad.reshape(ad.transpose(f2, (1, 2, 0)), (h * w, -1))
    return FeaturePyramid(
        coarse_flat=coarse, fine_flat=fine, coarse_shape=(hc, wc), fine_shape=(h, w)
    )


@lru_cache(maxsize=16)
def _sinusoidal_table(h: int, w: int, channels: int) -> np.ndarray:
    """DETR-style table: first half encodes y, second half x, each as
    interleaved sin/cos over geometric frequencies of the normalized position."""
    half = channels // 2
    n_freq = half // 2
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    posy = ys.reshape(-1) / h * 2 * np.pi
    posx = xs.reshape(-1) / w * 2 * np.pi
    table = np.zeros((h * w, channels))
    for i in range(n_freq):
        div = 10000.0 ** (2 * i / half)
        table[:, 2 * i] = np.sin(posy / div)
        table[:, 2 * i + 1] = np.cos(posy / div)
        table[:, half + 2 * i] = np.sin(posx / div)
        table[:, half + 2 * i + 1] = np.cos(posx / div)
    return table


def encode_2d(coarse_flat: ad.Tensor, shape: tuple, enabled: bool = True) -> ad.Tensor:
    """Add the fixed sinusoidal table to a flattened coarse map."""
    if not enabled:
        return coarse_flat
    h, w = shape
    table = _sinusoidal_table(h, w, coarse_flat.shape[1])
    return ad.add(coarse_flat, ad.Tensor(table))


def encode_3d(params: dict, points: np.ndarray) -> ad.Tensor:
    """3-layer MLP mapping xyz to the coarse feature width."""
    x = ad.Tensor(np.asarray(points, dtype=np.float64))
    h1 = ad.relu(ad.linear(x, params["pe3.w1"], params["pe3.b1"]))
    h2 = ad.relu(ad.linear(h1, params["pe3.w2"], params["pe3.b2"]))
    return ad.linear(h2, params["pe3.w3"], params["pe3.b3"])
