"""Rigid-body poses, pinhole projection, backprojection and pose-error metrics.

All geometry is double precision numpy. Poses are immutable; rotation
matrices are validated on construction and re-orthonormalized (polar
decomposition) after any incremental update elsewhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMask, NonPositiveDepth

_ORTHO_TOL = 1e-9


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3) via polar decomposition."""
    U, _, Vt = np.linalg.svd(R)
    out = U @ Vt
    if np.linalg.det(out) < 0:
        U = U.copy()
        U[:, -1] *= -1.0
        out = U @ Vt
    return out


class Pose:
    """Rigid transform taking object-frame points into the camera frame."""

    __slots__ = ("R", "t")

    def __init__(self, R: np.ndarray, t: np.ndarray):
        R = np.ascontiguousarray(R, dtype=np.float64)
        t = np.ascontiguousarray(t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        # snap tiny numerical drift so downstream invariants hold at 1e-9
        if np.max(np.abs(R.T @ R - np.eye(3))) > _ORTHO_TOL:
            R = orthonormalize(R)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        R.setflags(write=False)
        t.setflags(write=False)

    def __setattr__(self, name, value):  # immutable
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, t_scale: float = 1.0) -> "Pose":
        A = rng.standard_normal((3, 3))
        return cls(orthonormalize(A), rng.standard_normal(3) * t_scale)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Transform (N,3) or (3,) points into the camera frame."""
        return np.asarray(pts, dtype=np.float64) @ self.R.T + self.t

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def __repr__(self):
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics, pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


class PointCloud3D:
    """N>=4 points with a cached exact diameter (max pairwise distance)."""

    __slots__ = ("points", "diameter")

    def __init__(self, points: np.ndarray, diameter: float | None = None):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (N,3), got {points.shape}")
        if points.shape[0] < 4:
            raise ValueError("need at least 4 points")
        object.__setattr__(self, "points", points)
        if diameter is None:
            diameter = cloud_diameter(points)
        object.__setattr__(self, "diameter", float(diameter))
        points.setflags(write=False)

    def __setattr__(self, name, value):
        raise AttributeError("PointCloud3D is immutable")

    def __len__(self):
        return self.points.shape[0]


def cloud_diameter(points: np.ndarray) -> float:
    """Exact max pairwise distance; hull-reduced for large clouds."""
    pts = points
    if pts.shape[0] > 512:
        try:
            from scipy.spatial import ConvexHull

            pts = pts[ConvexHull(pts).vertices]
        except Exception:
            pass  # degenerate (coplanar etc.) -> brute force below
    best = 0.0
    for i in range(0, pts.shape[0], 1024):
        chunk = pts[i : i + 1024]
        d2 = np.sum((chunk[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def project(pose: Pose, cam: Camera, pts: np.ndarray):
    """Project object-frame points. Returns ((N,2) pixels, (N,) depths).

    Raises NonPositiveDepth if any transformed depth is <= 1e-9.
    """
    pc = pose.apply(np.atleast_2d(pts))
    z = pc[:, 2]
    if np.any(z <= 1e-9):
        raise NonPositiveDepth(f"min depth {z.min():.3g}")
    uv = np.empty((pc.shape[0], 2))
    uv[:, 0] = cam.fx * pc[:, 0] / z + cam.cx
    uv[:, 1] = cam.fy * pc[:, 1] / z + cam.cy
    return uv, z.copy()


def backproject_pixels(
    pix: np.ndarray, depths: np.ndarray, cam: Camera, pose: Pose
) -> np.ndarray:
    """Lift (N,2) pixels with depths to object-frame points via pose⁻¹."""
    pix = np.atleast_2d(pix).astype(np.float64)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    x = (pix[:, 0] - cam.cx) / cam.fx * depths
    y = (pix[:, 1] - cam.cy) / cam.fy * depths
    cam_pts = np.stack([x, y, depths], axis=1)
    return pose.inverse().apply(cam_pts)


def backproject(
    depth_map: np.ndarray, mask: np.ndarray, cam: Camera, pose: Pose
) -> PointCloud3D:
    """Backproject every masked pixel of a depth map to the object frame."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("no masked pixel to backproject")
    v, u = np.nonzero(mask)
    d = np.asarray(depth_map, dtype=np.float64)[v, u]
    if np.any(d <= 0):
        raise NonPositiveDepth("masked pixel with non-positive depth")
    pts = backproject_pixels(np.stack([u, v], axis=1).astype(np.float64), d, cam, pose)
    if pts.shape[0] < 4:
        pts = np.concatenate([pts] * 4, axis=0)[:4]
    return PointCloud3D(pts)


def add_metric(
    pred: Pose, gt: Pose, pts: PointCloud3D, symmetric: bool = False
) -> float:
    """ADD / ADD-S: mean (closest-point) distance between transformed models."""
    a = pred.apply(pts.points)
    b = gt.apply(pts.points)
    if not symmetric:
        return float(np.mean(np.linalg.norm(a - b, axis=1)))
    total = 0.0
    for i in range(0, a.shape[0], 512):
        chunk = a[i : i + 512]
        d2 = np.sum((chunk[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        total += float(np.sqrt(d2.min(axis=1)).sum())
    return total / a.shape[0]


def rotation_geodesic(predR: np.ndarray, gtR: np.ndarray) -> float:
    """Angle in radians between two rotations."""
    c = (np.trace(predR.T @ gtR) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
