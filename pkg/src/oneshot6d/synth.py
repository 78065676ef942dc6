"""Procedural objects, point-splat rendering and three-view sampling.

Objects are surface point clouds with low-frequency per-point color
attributes (sums of random 3D cosine waves), normalized to diameter 1.0.
Rendering is a z-buffer splat of points into pixels. Viewpoints live on a
sphere looking at the object centroid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import EmptyMask, NoEligiblePositive, NonPositiveDepth
from .geom import Camera, PointCloud3D, Pose, backproject_pixels, orthonormalize, project, rotation_geodesic

CACHE_MAGIC = b"OS6DOBJ1"

SHAPE_FAMILIES = ("sphere", "box", "blob")


@dataclass(frozen=True)
class SyntheticObject:
    cloud: PointCloud3D
    texture: np.ndarray  # (N, C) in [0, 1]

    def __post_init__(self):
        if self.texture.shape[0] != len(self.cloud):
            raise ValueError("texture rows must match cloud size")


@dataclass(frozen=True)
class RenderedView:
    image: np.ndarray  # (H, W, C)
    depth: np.ndarray  # (H, W)
    mask: np.ndarray  # (H, W) bool
    pose: Pose
    cam: Camera


@dataclass(frozen=True)
class ViewpointSet:
    poses: list[Pose]

    def __len__(self):
        return len(self.poses)

    def angular_distances(self, idx: int) -> np.ndarray:
        Rq = self.poses[idx].R
        return np.array([rotation_geodesic(p.R, Rq) for p in self.poses])


def default_camera(size: int = 64, focal: float = 100.0) -> Camera:
    return Camera(fx=focal, fy=focal, cx=size / 2.0, cy=size / 2.0, width=size, height=size)


def _sample_surface(rng: np.random.Generator, n: int, family: str) -> np.ndarray:
    if family == "sphere":
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return 0.5 * d
    if family == "box":
        half = 0.25 + 0.25 * rng.random(3)
        face = rng.integers(0, 6, n)
        uv = rng.uniform(-1.0, 1.0, (n, 2))
        pts = np.empty((n, 3))
        for axis in range(3):
            for sign, f in ((1.0, 2 * axis), (-1.0, 2 * axis + 1)):
                sel = face == f
                others = [a for a in range(3) if a != axis]
                pts[sel, axis] = sign * half[axis]
                pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
                pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
        return pts
    if family == "blob":
        d = rng.standard_normal((n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        # radial modulation by a few random spherical harmonics-ish waves
        r = np.full(n, 1.0)
        for _ in range(4):
            k = rng.standard_normal(3) * 2.0
            phase = rng.uniform(0, 2 * np.pi)
            r += 0.15 * np.cos(d @ k + phase)
        r = np.clip(r, 0.4, 1.6)
        return 0.5 * d * r[:, None]
    raise ValueError(f"unknown shape family {family!r}")


def _cosine_texture(rng: np.random.Generator, pts: np.ndarray, channels: int) -> np.ndarray:
    """Low-frequency 3D noise sampled at the points; [0,1] per channel."""
    n = pts.shape[0]
    tex = np.zeros((n, channels))
    for c in range(channels):
        vals = np.zeros(n)
        for _ in range(6):
            freq = rng.uniform(1.0, 4.0)
            k = rng.standard_normal(3)
            k *= 2 * np.pi * freq / np.linalg.norm(k)
            phase = rng.uniform(0, 2 * np.pi)
            vals += rng.uniform(0.3, 1.0) * np.cos(pts @ k + phase)
        lo, hi = vals.min(), vals.max()
        tex[:, c] = (vals - lo) / max(hi - lo, 1e-12)
    return tex


def generate_object(
    seed: int, n_points: int = 8192, shape_family: str = "blob", channels: int = 3
) -> SyntheticObject:
    """Deterministic per seed; diameter normalized to 1.0."""
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    rng = np.random.default_rng(seed)
    if shape_family == "random":
        shape_family = SHAPE_FAMILIES[rng.integers(0, len(SHAPE_FAMILIES))]
    pts = _sample_surface(rng, n_points, shape_family)
    pts -= pts.mean(axis=0)
    cloud = PointCloud3D(pts)
    pts = pts / cloud.diameter
    cloud = PointCloud3D(pts, diameter=1.0)
    tex = _cosine_texture(rng, pts, channels)
    return SyntheticObject(cloud=cloud, texture=tex)


def render(obj: SyntheticObject, pose: Pose, cam: Camera) -> RenderedView:
    """Nearest-pixel z-buffer splat of the object's points."""
    uv, z = project(pose, cam, obj.cloud.points)  # raises NonPositiveDepth
    u = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    v = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    image, depth, mask = kernels.zbuffer_splat(u, v, z, obj.texture, cam.height, cam.width)
    return RenderedView(image=image, depth=depth, mask=np.asarray(mask, dtype=bool), pose=pose, cam=cam)


def sphere_viewpoints(
    count: int, distance: float = 2.5, seed: int = 0, jitter: float = 0.0
) -> ViewpointSet:
    """Fibonacci-spiral directions looking at the origin."""
    rng = np.random.default_rng(seed)
    golden = (1 + 5**0.5) / 2
    poses = []
    for i in range(count):
        zc = 1 - 2 * (i + 0.5) / count
        r = np.sqrt(max(1 - zc * zc, 0.0))
        phi = 2 * np.pi * i / golden
        d = np.array([r * np.cos(phi), r * np.sin(phi), zc])
        if jitter > 0:
            d = d + rng.standard_normal(3) * jitter
            d /= np.linalg.norm(d)
        poses.append(look_at_pose(d * distance))
    return ViewpointSet(poses=poses)


def look_at_pose(eye: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``eye`` looking at the origin; returns object->camera pose."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = -eye / np.linalg.norm(eye)  # camera +z points at the object
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up) / np.linalg.norm(up)) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R_wc = np.stack([right, down, fwd], axis=0)  # world->camera rotation rows
    R_wc = orthonormalize(R_wc)
    t = -R_wc @ eye
    return Pose(R_wc, t)


def sample_three_views(
    views: ViewpointSet,
    rng: np.random.Generator,
    query_idx: int | None = None,
    band_deg=(5.0, 25.0),
    far_pool: int = 5,
):
    """Pick (query, positive, negative) indices per the angular-band rule."""
    n = len(views)
    if n < far_pool + 2:
        raise ValueError(f"need at least {far_pool + 2} viewpoints, got {n}")
    if query_idx is None:
        query_idx = int(rng.integers(0, n))
    dist = views.angular_distances(query_idx)
    lo, hi = np.deg2rad(band_deg[0]), np.deg2rad(band_deg[1])
    eligible = np.nonzero((dist >= lo) & (dist <= hi) & (np.arange(n) != query_idx))[0]
    if eligible.size == 0:
        raise NoEligiblePositive(f"no viewpoint within {band_deg} deg of query {query_idx}")
    pos_idx = int(eligible[rng.integers(0, eligible.size)])
    order = np.lexsort((np.arange(n), -dist))  # farthest first, ties by index
    pool = [i for i in order if i != query_idx][:far_pool]
    neg_idx = int(pool[rng.integers(0, len(pool))])
    return query_idx, pos_idx, neg_idx


@dataclass
class TemplateCloud:
    """3D keypoints sampled from template views with attached features.

    coarse_feats / fine_feats are autodiff Tensors (rows gathered from the
    views' feature maps) so gradients reach the extractor.
    """

    points: np.ndarray  # (L, 3) object frame
    coarse_feats: object  # Tensor (L, C_coarse)
    fine_feats: object  # Tensor (L, C_fine)
    src_view: np.ndarray  # (L,) template view index
    src_pixel: np.ndarray  # (L, 2) integer (u, v) in the source view
    sampled_with_replacement: bool = False


def sample_mask_pixels(mask: np.ndarray, m: int, rng: np.random.Generator):
    """m (u,v) in-mask pixels; with replacement (flagged) if mask is small."""
    v, u = np.nonzero(mask)
    if u.size == 0:
        raise EmptyMask("cannot sample from an empty mask")
    replace = u.size < m
    idx = rng.choice(u.size, size=m, replace=replace)
    return np.stack([u[idx], v[idx]], axis=1), replace


def build_template_cloud_multi(views, pyramids, m_per_view: int, rng) -> TemplateCloud:
    """Backproject m in-mask pixels per view and gather their features."""
    from . import ad

    pts_all, cf_all, ff_all, src_v, src_p = [], [], [], [], []
    flagged = False
    for vi, (view, pyr) in enumerate(zip(views, pyramids)):
        pix, replaced = sample_mask_pixels(view.mask, m_per_view, rng)
        flagged = flagged or replaced
        d = view.depth[pix[:, 1], pix[:, 0]]
        pts = backproject_pixels(pix.astype(np.float64), d, view.cam, view.pose)
        s = pyr.stride
        wc = view.cam.width // s
        coarse_idx = (pix[:, 1] // s) * wc + (pix[:, 0] // s)
        fine_idx = pix[:, 1] * view.cam.width + pix[:, 0]
        cf_all.append(ad.gather_rows(pyr.coarse_flat, coarse_idx))
        ff_all.append(ad.gather_rows(pyr.fine_flat, fine_idx))
        pts_all.append(pts)
        src_v.append(np.full(m_per_view, vi, dtype=np.int64))
        src_p.append(pix)
    return TemplateCloud(
        points=np.concatenate(pts_all, axis=0),
        coarse_feats=ad.concat(cf_all, axis=0),
        fine_feats=ad.concat(ff_all, axis=0),
        src_view=np.concatenate(src_v),
        src_pixel=np.concatenate(src_p, axis=0),
        sampled_with_replacement=flagged,
    )


def build_template_cloud(pos, neg, m: int, features, rng) -> TemplateCloud:
    """Two-template (positive + negative) variant used at training time."""
    return build_template_cloud_multi([pos, neg], features, m, rng)


# ---- augmentation -------------------------------------------------------


@dataclass
class AugmentConfig:
    color_jitter: float = 0.0  # per-channel scale/shift amplitude
    noise_std: float = 0.0
    zoom_jitter: float = 0.0  # relative box scale/center jitter
    frame_rotation: bool = False


@dataclass
class AugmentResult:
    view: RenderedView
    frame_rot: np.ndarray = field(default_factory=lambda: np.eye(3))


def rotate_frame(view: RenderedView, R0: np.ndarray) -> RenderedView:
    """Change the object's canonical frame: points become R0ᵀ·p, pose absorbs R0."""
    new_pose = Pose(view.pose.R @ R0, view.pose.t)
    return RenderedView(view.image, view.depth, view.mask, new_pose, view.cam)


def augment(view: RenderedView, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentResult:
    image, depth, mask, cam = view.image, view.depth, view.mask, view.cam
    if cfg.color_jitter > 0:
        scale = 1.0 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, image.shape[-1])
        shift = rng.uniform(-cfg.color_jitter, cfg.color_jitter, image.shape[-1])
        image = np.clip(image * scale + shift, 0.0, 1.0) * mask[..., None]
    if cfg.noise_std > 0:
        image = image + rng.standard_normal(image.shape) * cfg.noise_std
    out = RenderedView(image, depth, mask, view.pose, cam)
    if cfg.zoom_jitter > 0 and mask.any():
        out = _zoom_crop(out, cfg.zoom_jitter, rng)
    R0 = np.eye(3)
    if cfg.frame_rotation:
        R0 = orthonormalize(rng.standard_normal((3, 3)))
        out = rotate_frame(out, R0)
    return AugmentResult(view=out, frame_rot=R0)


def zoom_crop(view: RenderedView, x0: float, y0: float, size: float) -> RenderedView:
    """Crop [x0, x0+size) x [y0, y0+size) and rescale to the original size,
    with intrinsics updated so GT projection consistency is exact."""
    cam = view.cam
    H, W = cam.height, cam.width
    s = W / size
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    src_x = np.floor(x0 + (jj + 0.5) / s).astype(np.int64)
    src_y = np.floor(y0 + (ii + 0.5) / s).astype(np.int64)
    inb = (src_x >= 0) & (src_x < W) & (src_y >= 0) & (src_y < H)
    sx = np.clip(src_x, 0, W - 1)
    sy = np.clip(src_y, 0, H - 1)
    image = view.image[sy, sx] * inb[..., None]
    depth = view.depth[sy, sx] * inb
    mask = view.mask[sy, sx] & inb
    new_cam = Camera(
        fx=cam.fx * s,
        fy=cam.fy * s,
        cx=(cam.cx - x0) * s,
        cy=(cam.cy - y0) * s,
        width=W,
        height=H,
    )
    return RenderedView(image, depth, mask, view.pose, new_cam)


def _zoom_crop(view: RenderedView, jitter: float, rng: np.random.Generator) -> RenderedView:
    v, u = np.nonzero(view.mask)
    cx, cy = (u.min() + u.max()) / 2.0, (v.min() + v.max()) / 2.0
    extent = max(u.max() - u.min(), v.max() - v.min()) + 2.0
    size = extent * (1.3 + rng.uniform(-jitter, jitter))
    size = min(size, view.cam.width * 1.5)
    cx += rng.uniform(-jitter, jitter) * extent
    cy += rng.uniform(-jitter, jitter) * extent
    out = zoom_crop(view, cx - size / 2.0, cy - size / 2.0, size)
    if not out.mask.any():  # jittered box missed the object; keep original
        return view
    return out


# ---- farthest point sampling over view rotations ------------------------


def farthest_point_sample_views(views: ViewpointSet, count: int) -> list[int]:
    """Greedy FPS on rotation geodesics, seeded at index 0."""
    n = len(views)
    count = min(count, n)
    chosen = [0]
    dmin = views.angular_distances(0)
    for _ in range(count - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, views.angular_distances(nxt))
    return chosen


# ---- object cache format ------------------------------------------------


def save_object(path: Path, obj: SyntheticObject):
    """Binary cache record: magic, version, counts, raw float64 arrays."""
    path = Path(path)
    n, c = obj.texture.shape
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", 1, n, c))
        f.write(struct.pack("<d", obj.cloud.diameter))
        f.write(np.ascontiguousarray(obj.cloud.points).tobytes())
        f.write(np.ascontiguousarray(obj.texture).tobytes())


def load_object(path: Path) -> SyntheticObject:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CACHE_MAGIC:
            raise ValueError(f"bad object cache magic in {path}")
        version, n, c = struct.unpack("<III", f.read(12))
        if version != 1:
            raise ValueError(f"unsupported cache version {version}")
        (diameter,) = struct.unpack("<d", f.read(8))
        pts = np.frombuffer(f.read(n * 3 * 8)).reshape(n, 3).copy()
        tex = np.frombuffer(f.read(n * c * 8)).reshape(n, c).copy()
    return SyntheticObject(cloud=PointCloud3D(pts, diameter=diameter), texture=tex)
