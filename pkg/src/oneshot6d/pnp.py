"""Pose from 2D-3D correspondences: DLT initialization, RANSAC consensus,
damped Gauss-Newton reprojection refinement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateConfiguration, NonPositiveDepth, TooFewCorrespondences
from .geom import Camera, Pose, orthonormalize

MIN_CORRESPONDENCES = 6


@dataclass
class PnPResult:
    pose: Pose
    inlier_mask: np.ndarray
    mean_reprojection_error: float


def _normalized_pixels(pixels: np.ndarray, cam: Camera) -> np.ndarray:
    out = np.empty_like(pixels)
    out[:, 0] = (pixels[:, 0] - cam.cx) / cam.fx
    out[:, 1] = (pixels[:, 1] - cam.cy) / cam.fy
    return out


def _dlt(norm_pix: np.ndarray, pts: np.ndarray) -> Pose | None:
    """Linear solve for [R|t] from >=6 normalized correspondences."""
    n = pts.shape[0]
    A = np.zeros((2 * n, 12))
    X = np.concatenate([pts, np.ones((n, 1))], axis=1)
    A[0::2, 0:4] = X
    A[0::2, 8:12] = -norm_pix[:, 0:1] * X
    A[1::2, 4:8] = X
    A[1::2, 8:12] = -norm_pix[:, 1:2] * X
    _, s, Vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * max(s[0], 1e-300):  # solution not unique -> degenerate
        return None
    P = Vt[-1].reshape(3, 4)
    best = None
    for sign in (1.0, -1.0):
        M = sign * P[:, :3]
        sv = np.linalg.svd(M, compute_uv=False)
        scale = sv.mean()
        if scale < 1e-12:
            return None
        R = orthonormalize(M)
        t = sign * P[:, 3] / scale
        z = pts @ R.T[:, 2] + t[2]
        if np.all(z > 1e-9):
            err = np.abs(
                np.stack(
                    [(pts @ R.T[:, 0] + t[0]) / z, (pts @ R.T[:, 1] + t[1]) / z], axis=1
                )
                - norm_pix
            ).mean()
            if best is None or err < best[0]:
                best = (err, R, t)
    if best is None:
        return None
    return Pose(best[1], best[2])


def _reprojection_errors(pose: Pose, cam: Camera, pixels, pts) -> np.ndarray:
    pc = pose.apply(pts)
    z = pc[:, 2]
    err = np.full(pts.shape[0], np.inf)
    ok = z > 1e-9
    u = cam.fx * pc[ok, 0] / z[ok] + cam.cx
    v = cam.fy * pc[ok, 1] / z[ok] + cam.cy
    err[ok] = np.hypot(u - pixels[ok, 0], v - pixels[ok, 1])
    return err


def _skew(p: np.ndarray) -> np.ndarray:
    return np.array([[0, -p[2], p[1]], [p[2], 0, -p[0]], [-p[1], p[0], 0]])


def _rodrigues(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        return np.eye(3) + _skew(w)
    K = _skew(w / theta)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


def refine_gauss_newton(
    initial: Pose,
    pixels: np.ndarray,
    pts: np.ndarray,
    cam: Camera,
    weights: np.ndarray | None = None,
    max_iters: int = 50,
    tol: float = 1e-12,
) -> Pose:
    """Minimize weighted squared reprojection error over SO(3)xR³ with
    axis-angle increments and Levenberg damping (cost never increases)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    w = np.ones(pts.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    R, t = initial.R.copy(), initial.t.copy()
    if np.any(pts @ R.T[:, 2] + t[2] <= 1e-9):
        raise NonPositiveDepth("initial pose puts points behind the camera")

    def cost_and_residuals(R, t):
        pc = pts @ R.T + t
        z = pc[:, 2]
        if np.any(z <= 1e-9):
            return np.inf, None, None
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
        r = np.stack([u - pixels[:, 0], v - pixels[:, 1]], axis=1)
        return float((w[:, None] * r**2).sum()), r, pc

    lam = 1e-6
    cost, r, pc = cost_and_residuals(R, t)
    for _ in range(max_iters):
        n = pts.shape[0]
        z = pc[:, 2]
        J = np.zeros((2 * n, 6))
        fx_z = cam.fx / z
        fy_z = cam.fy / z
        # du/dp, dv/dp for camera-frame point p
        Jp = np.zeros((n, 2, 3))
        Jp[:, 0, 0] = fx_z
        Jp[:, 0, 2] = -cam.fx * pc[:, 0] / z**2
        Jp[:, 1, 1] = fy_z
        Jp[:, 1, 2] = -cam.fy * pc[:, 1] / z**2
        p_rot = pc - t
        for i in range(n):
            J[2 * i : 2 * i + 2, 0:3] = Jp[i] @ (-_skew(p_rot[i]))
            J[2 * i : 2 * i + 2, 3:6] = Jp[i]
        W = np.repeat(w, 2)
        JtW = J.T * W
        H = JtW @ J
        g = JtW @ r.reshape(-1)
        stepped = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(H + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            R_new = orthonormalize(_rodrigues(delta[:3]) @ R)
            t_new = t + delta[3:]
            new_cost, r_new, pc_new = cost_and_residuals(R_new, t_new)
            if new_cost < cost:
                R, t, cost, r, pc = R_new, t_new, new_cost, r_new, pc_new
                lam = max(lam / 3, 1e-12)
                stepped = True
                break
            lam *= 10
        if not stepped or np.linalg.norm(delta) < tol:
            break
    return Pose(orthonormalize(R), t)


def solve_pnp_ransac(
    pixels: np.ndarray,
    pts: np.ndarray,
    cam: Camera,
    weights: np.ndarray | None = None,
    inlier_px: float = 3.0,
    iters: int = 256,
    rng: np.random.Generator | None = None,
) -> PnPResult:
    """Repeated 6-point DLT solves, inlier consensus, Gauss-Newton polish."""
    pixels = np.asarray(pixels, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    if n < MIN_CORRESPONDENCES:
        raise TooFewCorrespondences(f"need >= {MIN_CORRESPONDENCES}, got {n}")
    if rng is None:
        rng = np.random.default_rng(0)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    # canonical ordering makes the result invariant to input permutation
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], pixels[:, 1], pixels[:, 0]))
    inv_order = np.argsort(order)
    pixels_s, pts_s, w_s = pixels[order], pts[order], w[order]
    norm_pix = _normalized_pixels(pixels_s, cam)

    best = None
    for _ in range(iters):
        sel = rng.choice(n, size=MIN_CORRESPONDENCES, replace=False)
        pose = _dlt(norm_pix[sel], pts_s[sel])
        if pose is None:
            continue
        err = _reprojection_errors(pose, cam, pixels_s, pts_s)
        inl = err < inlier_px
        count = int(inl.sum())
        mean_err = float(err[inl].mean()) if count else np.inf
        if best is None or count > best[0] or (count == best[0] and mean_err < best[1]):
            best = (count, mean_err, pose, inl)
    if best is None:
        raise DegenerateConfiguration("all RANSAC minimal sets were degenerate")
    count, _, pose, inl = best
    if count >= MIN_CORRESPONDENCES:
        pose = refine_gauss_newton(pose, pixels_s[inl], pts_s[inl], cam, weights=w_s[inl])
    # Robust polish over all correspondences: minimal DLT hypotheses are
    # ill-conditioned on shallow surface patches, so the consensus pose can be
    # far off while most correspondences are actually good. Cauchy-weighted
    # reweighting pulls those back in without trusting gross outliers.
    for _ in range(5):
        err = _reprojection_errors(pose, cam, pixels_s, pts_s)
        rw = w_s / (1.0 + (err / inlier_px) ** 2)
        try:
            pose = refine_gauss_newton(pose, pixels_s, pts_s, cam, weights=rw)
        except NonPositiveDepth:
            break
    # hard reclassification in the corrected basin, then unbiased final polish
    err = _reprojection_errors(pose, cam, pixels_s, pts_s)
    inl = err < inlier_px
    if inl.sum() >= MIN_CORRESPONDENCES:
        pose = refine_gauss_newton(pose, pixels_s[inl], pts_s[inl], cam, weights=w_s[inl])
        err = _reprojection_errors(pose, cam, pixels_s, pts_s)
        inl = err < inlier_px
    mean_err = float(err[inl].mean()) if inl.any() else float("inf")
    return PnPResult(pose=pose, inlier_mask=inl[inv_order], mean_reprojection_error=mean_err)
