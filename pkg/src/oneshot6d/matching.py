"""Coarse dense matching (dual-softmax, MNN extraction, focal loss) and
fine 2D expectation refinement with variance confidence."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ad
from .errors import NoGroundTruthPairs

CONFIDENCE_FLOOR = 1e-12


def score_matrix(img_feats: ad.Tensor, obj_feats: ad.Tensor, tau: float = 0.1) -> ad.Tensor:
    """Cosine similarities divided by the temperature."""
    return ad.mul(ad.cosine_similarity_matrix(img_feats, obj_feats), 1.0 / tau)


def dual_softmax(S: ad.Tensor) -> ad.Tensor:
    """Elementwise product of row-wise and column-wise softmax of S."""
    return ad.mul(ad.softmax(S, axis=1), ad.softmax(S, axis=0))


@dataclass
class MatchSet:
    pixel_idx: np.ndarray  # (N,) flattened coarse-cell index i
    keypoint_idx: np.ndarray  # (N,) object keypoint index c
    confidence: np.ndarray  # (N,)
    offsets: np.ndarray | None = None  # (N,2) fine pixel offsets
    variances: np.ndarray | None = None  # (N,)
    padded: np.ndarray = field(default_factory=lambda: np.empty(0, bool))

    def __len__(self):
        return self.pixel_idx.shape[0]


def extract_matches(P: np.ndarray, theta: float) -> MatchSet:
    """Mutual-argmax pairs with confidence >= theta; ties to lowest index."""
    if not (0.0 <= theta < 1.0):
        raise ValueError("theta must be in [0, 1)")
    P = np.asarray(P)
    row_best = P.argmax(axis=1)  # first occurrence wins ties
    col_best = P.argmax(axis=0)
    i = np.arange(P.shape[0])
    mutual = col_best[row_best] == i
    conf = P[i, row_best]
    keep = mutual & (conf >= theta)
    return MatchSet(
        pixel_idx=i[keep],
        keypoint_idx=row_best[keep],
        confidence=conf[keep],
        padded=np.zeros(int(keep.sum()), dtype=bool),
    )


def coarse_loss(P: ad.Tensor, gt_pairs: np.ndarray, gamma: float = 2.0) -> ad.Tensor:
    """Focal-modulated NLL over ground-truth (i, c) pairs."""
    gt_pairs = np.atleast_2d(np.asarray(gt_pairs, dtype=np.int64))
    if gt_pairs.size == 0:
        raise NoGroundTruthPairs("no ground-truth coarse pairs")
    n_cols = P.shape[1]
    flat_idx = gt_pairs[:, 0] * n_cols + gt_pairs[:, 1]
    p = ad.gather_rows(ad.reshape(P, (-1, 1)), flat_idx)
    p_safe = ad.clip_min(p, CONFIDENCE_FLOOR)
    focal = ad.mul(ad.power(ad.add(1.0, ad.mul(p, -1.0)), gamma), ad.log(p_safe))
    return ad.mul(ad.tmean(focal), -1.0)


def _window_indices(centers_uv: np.ndarray, w: int, width: int, height: int):
    """(N, w²) flat fine-map indices of w×w windows, centers clamped in-bounds."""
    r = w // 2
    cu = np.clip(centers_uv[:, 0], r, width - 1 - r)
    cv = np.clip(centers_uv[:, 1], r, height - 1 - r)
    clamped = (cu != centers_uv[:, 0]) | (cv != centers_uv[:, 1])
    rel = np.arange(-r, r + 1)
    du, dv = np.meshgrid(rel, rel)  # (w, w): dv varies over rows
    flat = (cv[:, None] + dv.reshape(-1)[None, :]) * width + (cu[:, None] + du.reshape(-1)[None, :])
    return flat.astype(np.int64), np.stack([cu, cv], axis=1), clamped


def window_offsets(w: int) -> np.ndarray:
    """(w², 2) (du, dv) offsets of window cells relative to the center."""
    r = w // 2
    rel = np.arange(-r, r + 1)
    du, dv = np.meshgrid(rel, rel)
    return np.stack([du.reshape(-1), dv.reshape(-1)], axis=1).astype(np.float64)


def fine_heatmap_expectation(win_feats: ad.Tensor, temp_feats: ad.Tensor, w: int):
    """Correlate (N·w², C) window features with per-match template features
    and return (offsets (N,2), variances (N,), heat (N,w²)) as Tensors."""
    n = temp_feats.shape[0]
    c = temp_feats.shape[1]
    win = ad.reshape(win_feats, (n, w * w, -1))
    # rowwise correlation: sum over channels of win * template
    temp = ad.reshape(temp_feats, (n, 1, c))
    corr = ad.tsum(ad.mul(win, temp), axis=2)  # (N, w²)
    heat = ad.softmax(ad.mul(corr, 1.0 / np.sqrt(c)), axis=1)
    rel = window_offsets(w)
    mean = ad.matmul(heat, ad.Tensor(rel))  # (N, 2)
    e2 = ad.matmul(heat, ad.Tensor((rel**2).sum(axis=1, keepdims=True)))  # (N,1)
    var = ad.add(ad.reshape(e2, (-1,)), ad.mul(ad.tsum(ad.mul(mean, mean), axis=1), -1.0))
    return mean, var, heat


def fine_refine_2d(
    matches: MatchSet,
    fine_query_flat: ad.Tensor,
    fine_shape: tuple,
    fine_template_feats: ad.Tensor,
    centers_uv: np.ndarray,
    w: int = 5,
):
    """Per-match w×w expectation refinement around the coarse match pixel.

    Returns (matches with offsets/variances filled, offset Tensor, variance
    Tensor) so training can differentiate through the expectation.
    """
    assert w % 2 == 1, "window must be odd"
    height, width = fine_shape
    flat_idx, centers, _ = _window_indices(centers_uv.astype(np.int64), w, width, height)
    win = ad.gather_rows(fine_query_flat, flat_idx.reshape(-1))
    mean, var, _ = fine_heatmap_expectation(win, fine_template_feats, w)
    out = MatchSet(
        pixel_idx=matches.pixel_idx,
        keypoint_idx=matches.keypoint_idx,
        confidence=matches.confidence,
        offsets=mean.data.copy(),
        variances=var.data.copy(),
        padded=matches.padded,
    )
    return out, mean, var, centers


def fine_loss(offsets: ad.Tensor, variances, gt_offsets: np.ndarray, eps: float = 1e-8) -> ad.Tensor:
    """Variance-weighted squared offset error; weights 1/σ² are detached."""
    var = variances.data if isinstance(variances, ad.Tensor) else np.asarray(variances)
    wgt = 1.0 / np.maximum(var, eps)
    err2 = ad.tsum(ad.power(ad.add(offsets, -np.asarray(gt_offsets, dtype=np.float64)), 2.0), axis=1)
    return ad.tmean(ad.mul(err2, wgt))
