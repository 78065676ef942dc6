"""Pose-conditioned 3D refinement: fine crops re-centered at the projected
matches, one grouped IO-Layer, a conv head predicting a 2D centroid factor
and a K-class zoom distribution, and the multiplicative pose update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import NoMatches, NonPositiveZoom, ShapeMismatch
from .geom import Camera, Pose, project
from .iolayer import IOLayerParams, io_layer_forward_grouped
from .matching import MatchSet, _window_indices, fine_heatmap_expectation

ZOOM_RANGE = (0.7, 1.43)
ZOOM_CLASSES = 100


def zoom_bin_centers(k: int = ZOOM_CLASSES, lo: float = ZOOM_RANGE[0], hi: float = ZOOM_RANGE[1]):
    """Log-uniform zoom classes, symmetric about 1 in log space."""
    return np.exp(np.linspace(np.log(lo), np.log(hi), k))


@dataclass(frozen=True)
class CropBox:
    """Square pixel region used to normalize centroid coordinates."""

    x0: float
    y0: float
    size: float

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        return (np.asarray(uv, dtype=np.float64) - np.array([self.x0, self.y0])) / self.size

    def denormalize(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) * self.size + np.array([self.x0, self.y0])


def mask_crop_box(mask: np.ndarray, margin: float = 1.3) -> CropBox:
    v, u = np.nonzero(mask)
    cx, cy = (u.min() + u.max()) / 2.0, (v.min() + v.max()) / 2.0
    size = max(u.max() - u.min(), v.max() - v.min(), 4.0) * margin
    return CropBox(x0=cx - size / 2.0, y0=cy - size / 2.0, size=size)


@dataclass
class PoseDelta:
    dz: float
    d2d: np.ndarray  # (2,) multiplicative factors in crop-normalized coords

    def __post_init__(self):
        if self.dz <= 0:
            raise NonPositiveZoom(f"zoom factor {self.dz}")


def centroid_norm(pose: Pose, cam: Camera, box: CropBox) -> np.ndarray:
    uv, _ = project(pose, cam, np.zeros((1, 3)))
    return box.normalize(uv[0])


def apply_pose_delta(pose: Pose, delta: PoseDelta, cam: Camera, box: CropBox) -> Pose:
    """Depth scaled by dz; centroid projection scaled by d2d (crop-normalized),
    back-solved to the new x/y translation with the rotation unchanged."""
    if delta.dz <= 0:
        raise NonPositiveZoom(f"zoom factor {delta.dz}")
    tz = pose.t[2] * delta.dz
    p = centroid_norm(pose, cam, box) * delta.d2d
    uv = box.denormalize(p)
    tx = (uv[0] - cam.cx) * tz / cam.fx
    ty = (uv[1] - cam.cy) * tz / cam.fy
    return Pose(pose.R, np.array([tx, ty, tz]))


def gt_pose_delta(pose0: Pose, gt: Pose, cam: Camera, box: CropBox) -> PoseDelta:
    """The delta that updates pose0 so its depth/centroid match gt."""
    dz = gt.t[2] / pose0.t[2]
    p0 = centroid_norm(pose0, cam, box)
    pg = centroid_norm(gt, cam, box)
    return PoseDelta(dz=float(dz), d2d=pg / p0)


def sample_training_perturbation(
    gt: Pose,
    cam: Camera,
    box: CropBox,
    rng: np.random.Generator,
    zoom_sigma: float = 0.03,
    offset_range: float = 0.1,
    zoom_mean: float = 0.97,
):
    """Draw noise ε and build the perturbed initial pose it defines, such
    that apply_pose_delta(pose0, ε) reproduces gt exactly.

    Scales follow the depth/offset error distribution measured on coarse
    PnP estimates, so the head trains on realistic corrections.  The mean
    zoom is below 1 because the coarse solver systematically overestimates
    depth: matched pixels sit slightly inward of the true projections
    (coarse-cell quantization plus the windowed expectation drifting off
    silhouette cells), which shrinks the image footprint and pushes the
    solved camera away."""
    dz = float(
        np.clip(
            np.exp(rng.normal(np.log(zoom_mean), zoom_sigma)),
            ZOOM_RANGE[0],
            ZOOM_RANGE[1],
        )
    )
    d2d = 1.0 + rng.uniform(-offset_range, offset_range, 2)
    tz0 = gt.t[2] / dz
    p0 = centroid_norm(gt, cam, box) / d2d
    uv = box.denormalize(p0)
    t0 = np.array([(uv[0] - cam.cx) * tz0 / cam.fx, (uv[1] - cam.cy) * tz0 / cam.fy, tz0])
    return Pose(gt.R, t0), PoseDelta(dz=dz, d2d=d2d)


# ---- refine input -------------------------------------------------------


@dataclass
class RefineInput:
    grid: ad.Tensor  # (4, Hc, Wc): offset u, offset v, confidence, validity
    offsets: ad.Tensor  # (N, 2) per-match expectations
    variances: ad.Tensor  # (N,)
    cells: np.ndarray  # (N,) coarse cell of each match
    clamped: np.ndarray  # (N,) bool, crop center was out of image


def init_refine_head_params(rng, params: dict, k: int = ZOOM_CLASSES, c_grid: int = 4):
    params["rh.c1.w"] = ad.parameter((32, c_grid, 3, 3), rng)
    params["rh.c1.b"] = ad.parameter(np.zeros(32))
    params["rh.c2.w"] = ad.parameter((64, 32, 3, 3), rng)
    params["rh.c2.b"] = ad.parameter(np.zeros(64))
    params["rh.c3.w"] = ad.parameter((64, 64, 3, 3), rng)
    params["rh.c3.b"] = ad.parameter(np.zeros(64))
    params["rh.d2d.w"] = ad.parameter((64, 2), rng, scale=0.01)
    params["rh.d2d.b"] = ad.parameter(np.ones(2))  # identity factor prior
    params["rh.zoom.w"] = ad.parameter((64, k), rng, scale=0.01)
    params["rh.zoom.b"] = ad.parameter(np.zeros(k))


def build_refine_input(
    matches: MatchSet,
    pose0: Pose,
    cam: Camera,
    fine_query_flat: ad.Tensor,
    fine_shape: tuple,
    template_points: np.ndarray,
    template_fine_feats: ad.Tensor,
    io_params: IOLayerParams,
    coarse_shape: tuple,
    stride: int,
    window: int = 5,
):
    """Crops centered at the pose0-projected matched keypoints, refined by a
    single grouped IO-Layer, reduced to per-match 2D expectations, scattered
    onto the coarse grid with their variance confidences."""
    n = len(matches)
    if n == 0:
        raise NoMatches("refinement needs at least one match")
    pts = template_points[matches.keypoint_idx]
    pc = pose0.apply(pts)
    height, width = fine_shape
    z = np.maximum(pc[:, 2], 1e-6)
    uv = np.stack(
        [cam.fx * pc[:, 0] / z + cam.cx, cam.fy * pc[:, 1] / z + cam.cy], axis=1
    )
    centers = np.floor(uv + 0.5).astype(np.int64)
    flat_idx, centers_cl, clamped = _window_indices(centers, window, width, height)
    win = ad.gather_rows(fine_query_flat, flat_idx.reshape(-1))
    c_fine = win.shape[1]
    crops = ad.reshape(win, (n, window * window, c_fine))
    temps = ad.reshape(template_fine_feats, (n, 1, c_fine))
    crops_r, temps_r = io_layer_forward_grouped(crops, temps, io_params)
    offsets, variances, _ = fine_heatmap_expectation(
        ad.reshape(crops_r, (n * window * window, c_fine)),
        ad.reshape(temps_r, (n, c_fine)),
        window,
    )
    hc, wc = coarse_shape
    cells = np.minimum(centers_cl[:, 1] // stride, hc - 1) * wc + np.minimum(
        centers_cl[:, 0] // stride, wc - 1
    )
    conf = ad.Tensor((1.0 / (1.0 + matches.variances if matches.variances is not None else np.ones(n))).reshape(-1, 1))
    vals = ad.concat(
        [offsets, conf, ad.Tensor(np.ones((n, 1)))], axis=1
    )  # (N, 4)
    one_hot = np.zeros((n, hc * wc))
    one_hot[np.arange(n), cells] = 1.0
    grid_flat = ad.matmul(ad.Tensor(one_hot.T), vals)  # (Hc*Wc, 4)
    grid = ad.transpose(ad.reshape(grid_flat, (hc, wc, 4)), (2, 0, 1))
    return RefineInput(
        grid=grid, offsets=offsets, variances=variances, cells=cells, clamped=clamped
    )


@dataclass
class RefineOutput:
    d2d: ad.Tensor  # (2,)
    zoom_logits: ad.Tensor  # (K,)
    dz: ad.Tensor  # scalar expectation over bin centers

    def delta(self) -> PoseDelta:
        return PoseDelta(dz=float(self.dz.data), d2d=self.d2d.data.copy())


def refine_head_forward(input: RefineInput, params: dict, k: int = ZOOM_CLASSES) -> RefineOutput:
    grid = input.grid
    if grid.shape[0] != params["rh.c1.w"].shape[1]:
        raise ShapeMismatch(f"grid channels {grid.shape[0]}")
    h = ad.relu(ad.conv2d(grid, params["rh.c1.w"], params["rh.c1.b"], stride=2))
    h = ad.relu(ad.conv2d(h, params["rh.c2.w"], params["rh.c2.b"], stride=2))
    h = ad.relu(ad.conv2d(h, params["rh.c3.w"], params["rh.c3.b"]))
    pooled = ad.reshape(ad.tmean(ad.reshape(h, (h.shape[0], -1)), axis=1), (1, -1))
    d2d = ad.reshape(ad.linear(pooled, params["rh.d2d.w"], params["rh.d2d.b"]), (-1,))
    logits = ad.reshape(ad.linear(pooled, params["rh.zoom.w"], params["rh.zoom.b"]), (-1,))
    probs = ad.softmax(logits, axis=0)
    dz = ad.tsum(ad.mul(probs, ad.Tensor(zoom_bin_centers(k))))
    return RefineOutput(d2d=d2d, zoom_logits=logits, dz=dz)


def refine_losses(output: RefineOutput, gt_delta: PoseDelta):
    """L1 supervision of the zoom and 2D factors against the sampled noise."""
    l_z = ad.absolute(ad.add(output.dz, -gt_delta.dz))
    l_2d = ad.tsum(ad.absolute(ad.add(output.d2d, -np.asarray(gt_delta.d2d))))
    return l_z, l_2d


def total_loss(l_c, l_f, l_z, l_2d, alpha: float = 100.0):
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return ad.add(ad.add(l_c, l_f), ad.mul(ad.add(l_z, l_2d), alpha))
