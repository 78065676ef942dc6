"""Held-out evaluation: template-bank inference, PnP + one refinement step,
ADD/rotation metrics, threshold curves, and the pruning/template ablations."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ad, matching, pnp, refine3d, synth, train
from .config import Config
from .errors import OneShot6DError
from .geom import Pose, add_metric, rotation_geodesic
from .iolayer import IOState, stack_forward
from .model import PoseModel
from .synth import SyntheticObject


@dataclass
class ObjectBank:
    """Per-object inference state reused across queries: the template cloud
    with its frozen features, already passed through nothing (features are
    re-encoded per query only on the image side)."""

    obj: SyntheticObject
    template: synth.TemplateCloud
    object_tokens: ad.Tensor  # encoded (coarse feats + 3D encoding)


def build_bank(
    model: PoseModel, obj: SyntheticObject, views: synth.ViewpointSet, cfg: Config
) -> ObjectBank:
    cam = synth.default_camera(cfg.image_size, cfg.focal)
    chosen = synth.farthest_point_sample_views(views, cfg.test_template_views)
    rendered = [synth.render(obj, views.poses[i], cam) for i in chosen]
    pyramids = [model.extract(v.image) for v in rendered]
    m_per_view = max(cfg.test_keypoints // len(rendered), 1)
    rng = np.random.default_rng(cfg.seed + 9999)
    template = synth.build_template_cloud_multi(rendered, pyramids, m_per_view, rng)
    tokens = model.encode_template(template.points, template.coarse_feats)
    return ObjectBank(obj=obj, template=template, object_tokens=tokens.detach())


@dataclass
class InferResult:
    pose_pnp: Pose | None
    pose_refined: Pose | None
    n_matches: int
    n_inliers: int
    failure: str = ""
    match_pixels: np.ndarray | None = None  # (N,2) refined pixel coords
    match_points: np.ndarray | None = None  # (N,3)
    match_confidence: np.ndarray | None = None
    matching_seconds: float = 0.0


def infer(
    model: PoseModel,
    bank: ObjectBank,
    query: synth.RenderedView,
    with_refine: bool = True,
    refine_zoom: bool = True,
) -> InferResult:
    """Match, solve PnP, and optionally refine the pose.

    ``refine_zoom=False`` keeps the refinement head's 2D offset correction but
    forces the depth zoom factor to 1, isolating the 2D-only variant.
    """
    cfg = model.cfg
    t0 = time.perf_counter()
    q_pyr = model.extract(query.image)
    img_tokens = model.encode_query(q_pyr)
    state = IOState(image_feats=img_tokens.detach(), object_feats=bank.object_tokens)
    state, records = stack_forward(
        state, model.io_layers, cfg.prune_schedule, model.confidence_fn
    )
    final_conf, final_indices = records[-1]
    matches = matching.extract_matches(final_conf.data, cfg.theta)
    t_match = time.perf_counter() - t0
    if len(matches) == 0:
        return InferResult(None, None, 0, 0, failure="no-matches", matching_seconds=t_match)
    keypoint_ids = final_indices[matches.keypoint_idx]

    hc, wc = q_pyr.coarse_shape
    centers = train.cell_centers_px(matches.pixel_idx, wc, q_pyr.stride)
    temp_fine = ad.gather_rows(bank.template.fine_feats, keypoint_ids)
    refined, mean, _, _ = matching.fine_refine_2d(
        matches, q_pyr.fine_flat, q_pyr.fine_shape, temp_fine, centers, cfg.fine_window
    )
    pixels = centers + mean.data
    points = bank.template.points[keypoint_ids]

    if len(matches) < pnp.MIN_CORRESPONDENCES:
        return InferResult(
            None, None, len(matches), 0, failure="too-few-matches",
            match_pixels=pixels, match_points=points,
            match_confidence=matches.confidence, matching_seconds=t_match,
        )
    try:
        res = pnp.solve_pnp_ransac(
            pixels, points, query.cam, weights=matches.confidence,
            inlier_px=cfg.pnp_inlier_px, iters=cfg.pnp_iters,
            rng=np.random.default_rng(cfg.seed + 7),
        )
    except OneShot6DError as e:
        return InferResult(
            None, None, len(matches), 0, failure=type(e).__name__,
            match_pixels=pixels, match_points=points,
            match_confidence=matches.confidence, matching_seconds=t_match,
        )

    pose_refined = res.pose
    if with_refine and query.mask.any():
        try:
            box = refine3d.mask_crop_box(query.mask)
            top = train.top_k_matches(
                matching.MatchSet(
                    pixel_idx=matches.pixel_idx,
                    keypoint_idx=keypoint_ids,
                    confidence=matches.confidence,
                    variances=refined.variances,
                    padded=matches.padded,
                ),
                cfg.refine_top_k,
            )
            temp_top = ad.gather_rows(bank.template.fine_feats, top.keypoint_idx)
            rin = refine3d.build_refine_input(
                top, res.pose, query.cam, q_pyr.fine_flat, q_pyr.fine_shape,
                bank.template.points, temp_top, model.fine_io,
                q_pyr.coarse_shape, q_pyr.stride, cfg.fine_window,
            )
            out = refine3d.refine_head_forward(rin, model.params, cfg.zoom_classes)
            delta = out.delta()
            if not refine_zoom:
                delta = refine3d.PoseDelta(1.0, delta.d2d)
            pose_refined = refine3d.apply_pose_delta(res.pose, delta, query.cam, box)
        except OneShot6DError:
            pass  # keep the unrefined PnP pose

    return InferResult(
        pose_pnp=res.pose,
        pose_refined=pose_refined,
        n_matches=len(matches),
        n_inliers=int(res.inlier_mask.sum()),
        match_pixels=pixels,
        match_points=points,
        match_confidence=matches.confidence,
        matching_seconds=t_match,
    )


@dataclass
class EvalRow:
    object_index: int
    query_index: int
    n_matches: int
    n_inliers: int
    add: float  # np.inf on failure
    add_pnp: float
    rot_err_deg: float
    trans_err: float
    diameter: float
    failure: str = ""


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def recall_at(self, frac: float, pnp_only: bool = False) -> float:
        if not self.rows:
            return 0.0
        vals = [(r.add_pnp if pnp_only else r.add) / r.diameter for r in self.rows]
        return float(np.mean([v < frac for v in vals]))

    def median_rotation_error(self) -> float:
        finite = [r.rot_err_deg for r in self.rows if np.isfinite(r.rot_err_deg)]
        return float(np.median(finite)) if finite else float("inf")

    def threshold_curve(self, n: int = 50):
        """(thresholds as diameter fractions, recall) across [0, 0.5]."""
        ts = np.linspace(0.0, 0.5, n)
        rel = np.array([r.add / r.diameter for r in self.rows]) if self.rows else np.array([])
        rec = np.array([float(np.mean(rel < t)) if rel.size else 0.0 for t in ts])
        return ts, rec


def evaluate(
    model: PoseModel,
    objects: list[SyntheticObject],
    viewpoints: list[synth.ViewpointSet],
    cfg: Config | None = None,
    queries_per_object: int | None = None,
    with_refine: bool = True,
    refine_zoom: bool = True,
    log=None,
) -> EvalReport:
    cfg = cfg or model.cfg
    nq = queries_per_object or cfg.queries_per_object
    cam = synth.default_camera(cfg.image_size, cfg.focal)
    report = EvalReport()
    for oi, (obj, views) in enumerate(zip(objects, viewpoints)):
        bank = build_bank(model, obj, views, cfg)
        qrng = np.random.default_rng(cfg.seed * 97 + oi)
        # held-out query viewpoints: random poses not in the template set
        for qi in range(nq):
            eye = qrng.standard_normal(3)
            eye = eye / np.linalg.norm(eye) * cfg.view_distance
            pose_gt = synth.look_at_pose(eye)
            query = synth.render(obj, pose_gt, cam)
            if query.mask.sum() < 8:
                continue
            res = infer(model, bank, query, with_refine, refine_zoom=refine_zoom)
            pose = res.pose_refined
            if pose is None:
                report.rows.append(EvalRow(
                    oi, qi, res.n_matches, res.n_inliers, np.inf, np.inf, np.inf,
                    np.inf, obj.cloud.diameter, res.failure,
                ))
                continue
            pts = obj.cloud
            report.rows.append(EvalRow(
                object_index=oi,
                query_index=qi,
                n_matches=res.n_matches,
                n_inliers=res.n_inliers,
                add=add_metric(pose, pose_gt, pts),
                add_pnp=add_metric(res.pose_pnp, pose_gt, pts),
                rot_err_deg=np.degrees(rotation_geodesic(pose.R, pose_gt.R)),
                trans_err=float(np.linalg.norm(pose.t - pose_gt.t)),
                diameter=obj.cloud.diameter,
            ))
        if log:
            sub = [r for r in report.rows if r.object_index == oi]
            rec = np.mean([r.add / r.diameter < 0.1 for r in sub]) if sub else 0.0
            log(f"object {oi}: recall@0.1d {rec:.2f} over {len(sub)} queries")
    return report


def write_report_csv(report: EvalReport, path: Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["object_index", "query_index", "n_matches", "n_inliers",
                    "add", "add_pnp", "rot_err_deg", "trans_err", "diameter", "failure"])
        for r in report.rows:
            w.writerow([r.object_index, r.query_index, r.n_matches, r.n_inliers,
                        f"{r.add:.6g}", f"{r.add_pnp:.6g}", f"{r.rot_err_deg:.6g}",
                        f"{r.trans_err:.6g}", f"{r.diameter:.6g}", r.failure])


def write_curve_csv(report: EvalReport, path: Path, n: int = 50):
    ts, rec = report.threshold_curve(n)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold_frac", "recall"])
        for t, r in zip(ts, rec):
            w.writerow([f"{t:.6g}", f"{r:.6g}"])


def write_matches_csv(res: InferResult, path: Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["u", "v", "x", "y", "z", "confidence"])
        if res.match_pixels is not None:
            for uv, p, c in zip(res.match_pixels, res.match_points, res.match_confidence):
                w.writerow([f"{uv[0]:.4f}", f"{uv[1]:.4f}", f"{p[0]:.6f}",
                            f"{p[1]:.6f}", f"{p[2]:.6f}", f"{c:.6g}"])


def ablate_pruning(
    model: PoseModel,
    objects: list,
    viewpoints: list,
    keep_fractions=(1.0, 0.5, 0.1),
    queries_per_object: int = 10,
    warmup_iters: int = 3,
):
    """Recall and matching-stage runtime per pruning keep fraction.

    Runtime measures feature matching plus attention only; the first
    `warmup_iters` queries are discarded from the timing average.
    """
    cfg = model.cfg
    results = []
    for kf in keep_fractions:
        schedule = [kf if s is not None else None for s in cfg.prune_schedule]
        sub = Config(**{**cfg.__dict__, "prune_schedule": schedule})
        sub_model = PoseModel(sub, params=model.params)
        report = evaluate(sub_model, objects, viewpoints, sub, queries_per_object)
        times = []
        bank = build_bank(sub_model, objects[0], viewpoints[0], sub)
        cam = synth.default_camera(sub.image_size, sub.focal)
        trng = np.random.default_rng(123)
        for it in range(warmup_iters + 8):
            eye = trng.standard_normal(3)
            eye = eye / np.linalg.norm(eye) * sub.view_distance
            q = synth.render(objects[0], synth.look_at_pose(eye), cam)
            if not q.mask.any():
                continue
            r = infer(sub_model, bank, q, with_refine=False)
            if it >= warmup_iters:
                times.append(r.matching_seconds)
        results.append({
            "keep_fraction": kf,
            "recall_01d": report.recall_at(0.1),
            "median_rot_deg": report.median_rotation_error(),
            "matching_seconds": float(np.mean(times)) if times else float("nan"),
        })
    return results


def ablate_templates(
    model: PoseModel,
    objects: list,
    viewpoints: list,
    fractions=(1.0, 0.5, 0.25, 0.1),
    queries_per_object: int = 10,
):
    """Recall as the template view budget shrinks (farthest-point subsets)."""
    cfg = model.cfg
    results = []
    for frac in fractions:
        n_views = max(int(round(cfg.test_template_views * frac)), 2)
        sub = Config(**{**cfg.__dict__, "test_template_views": n_views})
        sub_model = PoseModel(sub, params=model.params)
        report = evaluate(sub_model, objects, viewpoints, sub, queries_per_object)
        results.append({
            "fraction": frac,
            "n_template_views": n_views,
            "recall_01d": report.recall_at(0.1),
            "median_rot_deg": report.median_rotation_error(),
        })
    return results


def write_ablation_csv(rows: list[dict], path: Path):
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
