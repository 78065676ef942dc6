"""Three-view training: sampling, forward pass, combined loss, AdamW with
warmup/cosine schedule, metrics CSV and resumable checkpoints."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ad, matching, refine3d, synth
from .ad import AdamWState, adamw_step, warmup_cosine_lr
from .config import Config
from .errors import NoEligiblePositive, NoGroundTruthPairs, OneShot6DError
from .iolayer import IOState, stack_forward
from .model import PoseModel, load_checkpoint, save_checkpoint
from .synth import RenderedView, SyntheticObject


class TrainingDiverged(OneShot6DError):
    """Loss became non-finite."""


OCCLUSION_TOL_FRAC = 0.02  # of object diameter, for the depth test


def object_seed(base_seed: int, index: int, test: bool = False) -> int:
    return base_seed * 1_000_003 + index + (500_000 if test else 0)


def make_object(cfg: Config, index: int, test: bool = False) -> SyntheticObject:
    return synth.generate_object(
        object_seed(cfg.seed, index, test), cfg.n_points, cfg.shape_family, cfg.channels
    )


def make_viewpoints(cfg: Config, index: int, test: bool = False) -> synth.ViewpointSet:
    return synth.sphere_viewpoints(
        cfg.n_viewpoints, cfg.view_distance, seed=object_seed(cfg.seed, index, test), jitter=0.02
    )


def visible_keypoints(points: np.ndarray, view: RenderedView, diameter: float = 1.0):
    """GT visibility of template points in a view: projection in-mask and
    passing a depth test against the rendered depth map.

    Returns (visible mask, (N,2) float projections, (N,) flat coarse cells).
    """
    from .features import COARSE_STRIDE

    cam = view.cam
    pc = view.pose.apply(points)
    z = pc[:, 2]
    ok = z > 1e-9
    uv = np.zeros((points.shape[0], 2))
    uv[ok, 0] = cam.fx * pc[ok, 0] / z[ok] + cam.cx
    uv[ok, 1] = cam.fy * pc[ok, 1] / z[ok] + cam.cy
    ui = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    vi = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    inb = ok & (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    uis, vis = np.clip(ui, 0, cam.width - 1), np.clip(vi, 0, cam.height - 1)
    in_mask = inb & view.mask[vis, uis]
    depth_ok = np.abs(view.depth[vis, uis] - z) < OCCLUSION_TOL_FRAC * diameter
    visible = in_mask & depth_ok
    s = COARSE_STRIDE
    wc = cam.width // s
    cells = (vis // s) * wc + (uis // s)
    return visible, uv, cells


def gt_coarse_pairs(visible: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """(i, c) rows: coarse cell of each visible keypoint's GT projection."""
    c = np.nonzero(visible)[0]
    return np.stack([cells[c], c], axis=1)


def pad_with_gt_matches(
    matches: matching.MatchSet, gt_pairs: np.ndarray, target_count: int, P: np.ndarray | None = None
) -> matching.MatchSet:
    """Append GT pairs absent from the match set until target or exhaustion."""
    have = set(zip(matches.pixel_idx.tolist(), matches.keypoint_idx.tolist()))
    add_i, add_c = [], []
    for i, c in np.atleast_2d(gt_pairs):
        if len(matches) + len(add_i) >= target_count:
            break
        if (int(i), int(c)) not in have:
            have.add((int(i), int(c)))
            add_i.append(int(i))
            add_c.append(int(c))
    if not add_i:
        return matches
    conf = (
        P[np.array(add_i), np.array(add_c)] if P is not None else np.ones(len(add_i))
    )
    return matching.MatchSet(
        pixel_idx=np.concatenate([matches.pixel_idx, np.array(add_i, dtype=np.int64)]),
        keypoint_idx=np.concatenate([matches.keypoint_idx, np.array(add_c, dtype=np.int64)]),
        confidence=np.concatenate([matches.confidence, conf]),
        padded=np.concatenate([matches.padded, np.ones(len(add_i), dtype=bool)]),
    )


def top_k_matches(matches: matching.MatchSet, k: int) -> matching.MatchSet:
    if len(matches) <= k:
        return matches
    order = np.lexsort((matches.pixel_idx, -matches.confidence))[:k]
    order = np.sort(order)
    return matching.MatchSet(
        pixel_idx=matches.pixel_idx[order],
        keypoint_idx=matches.keypoint_idx[order],
        confidence=matches.confidence[order],
        padded=matches.padded[order],
    )


def cell_centers_px(cells: np.ndarray, coarse_width: int, stride: int) -> np.ndarray:
    """Fine-resolution center pixel of flattened coarse cells."""
    u = (cells % coarse_width) * stride + stride // 2
    v = (cells // coarse_width) * stride + stride // 2
    return np.stack([u, v], axis=1).astype(np.float64)


@dataclass
class SampleLosses:
    coarse: ad.Tensor
    fine: ad.Tensor | None
    zoom: ad.Tensor | None
    offset2d: ad.Tensor | None
    n_matches: int = 0
    n_padded: int = 0
    mask_too_small: bool = False


def sample_forward(
    model: PoseModel,
    obj: SyntheticObject,
    query: RenderedView,
    pos: RenderedView,
    neg: RenderedView,
    rng: np.random.Generator,
    with_refine: bool = True,
) -> SampleLosses:
    """Losses for one three-view training instance."""
    cfg = model.cfg
    q_pyr = model.extract(query.image)
    pyramids = [model.extract(pos.image), model.extract(neg.image)]
    template = synth.build_template_cloud(pos, neg, cfg.m_template, pyramids, rng)
    flagged = template.sampled_with_replacement

    img_tokens = model.encode_query(q_pyr)
    obj_tokens = model.encode_template(template.points, template.coarse_feats)
    state = IOState(image_feats=img_tokens, object_feats=obj_tokens)
    state, records = stack_forward(
        state, model.io_layers, cfg.prune_schedule, model.confidence_fn
    )

    visible, uv_gt, cells = visible_keypoints(template.points, query, obj.cloud.diameter)

    # coarse focal loss on every recorded confidence matrix (the same head
    # drives the pruning decisions, so intermediates are supervised too)
    losses = []
    for conf, indices in records:
        vis_here = visible[indices]
        if not vis_here.any():
            continue
        pos_positions = np.nonzero(vis_here)[0]
        pairs = np.stack([cells[indices[pos_positions]], pos_positions], axis=1)
        losses.append(matching.coarse_loss(conf, pairs, cfg.gamma))
    if not losses:
        raise NoGroundTruthPairs("no visible keypoint in the query view")
    l_c = losses[0]
    for extra in losses[1:]:
        l_c = ad.add(l_c, extra)
    l_c = ad.mul(l_c, 1.0 / len(losses))

    final_conf, final_indices = records[-1]
    matches = matching.extract_matches(final_conf.data, cfg.theta)
    # map keypoint column positions back to original template ids
    matches = matching.MatchSet(
        pixel_idx=matches.pixel_idx,
        keypoint_idx=final_indices[matches.keypoint_idx],
        confidence=matches.confidence,
        padded=matches.padded,
    )
    surviving_pairs = gt_coarse_pairs(
        visible & np.isin(np.arange(len(visible)), final_indices), cells
    )
    n_real = len(matches)
    matches = top_k_matches(matches, cfg.refine_top_k)
    matches = pad_with_gt_matches(matches, surviving_pairs, cfg.refine_top_k)

    # fine supervision only where the GT projection lands inside the window
    hc, wc = q_pyr.coarse_shape
    stride = q_pyr.stride
    centers = cell_centers_px(matches.pixel_idx, wc, stride)
    gt_off = uv_gt[matches.keypoint_idx] - centers
    r = cfg.fine_window // 2
    fine_ok = (
        visible[matches.keypoint_idx]
        & (np.abs(gt_off[:, 0]) <= r)
        & (np.abs(gt_off[:, 1]) <= r)
    )
    l_f = None
    if fine_ok.any():
        sel = np.nonzero(fine_ok)[0]
        sub = matching.MatchSet(
            pixel_idx=matches.pixel_idx[sel],
            keypoint_idx=matches.keypoint_idx[sel],
            confidence=matches.confidence[sel],
            padded=matches.padded[sel],
        )
        temp_fine = ad.gather_rows(template.fine_feats, sub.keypoint_idx)
        _, mean, var, _ = matching.fine_refine_2d(
            sub, q_pyr.fine_flat, q_pyr.fine_shape, temp_fine, centers[sel], cfg.fine_window
        )
        l_f = matching.fine_loss(mean, var, gt_off[sel])

    l_z = l_2d = None
    if with_refine and len(matches) > 0 and query.mask.any():
        box = refine3d.mask_crop_box(query.mask)
        pose0, eps = refine3d.sample_training_perturbation(query.pose, query.cam, box, rng)
        temp_fine_all = ad.gather_rows(template.fine_feats, matches.keypoint_idx)
        rin = refine3d.build_refine_input(
            matches,
            pose0,
            query.cam,
            q_pyr.fine_flat,
            q_pyr.fine_shape,
            template.points,
            temp_fine_all,
            model.fine_io,
            q_pyr.coarse_shape,
            stride,
            cfg.fine_window,
        )
        out = refine3d.refine_head_forward(rin, model.params, cfg.zoom_classes)
        l_z, l_2d = refine3d.refine_losses(out, eps)

    return SampleLosses(
        coarse=l_c,
        fine=l_f,
        zoom=l_z,
        offset2d=l_2d,
        n_matches=n_real,
        n_padded=int(matches.padded.sum()),
        mask_too_small=flagged,
    )


def draw_sample(cfg: Config, obj, views, rng, max_tries: int = 20):
    """Render an augmented (query, pos, neg) triple with a shared canonical
    frame rotation; retries queries with no eligible positive."""
    acfg = synth.AugmentConfig(
        color_jitter=cfg.color_jitter,
        noise_std=cfg.noise_std,
        zoom_jitter=cfg.zoom_jitter,
        frame_rotation=False,
    )
    cam = synth.default_camera(cfg.image_size, cfg.focal)
    for _ in range(max_tries):
        try:
            qi, pi, ni = synth.sample_three_views(views, rng)
        except NoEligiblePositive:
            continue
        q = synth.augment(synth.render(obj, views.poses[qi], cam), acfg, rng).view
        p = synth.augment(synth.render(obj, views.poses[pi], cam), acfg, rng).view
        n = synth.augment(synth.render(obj, views.poses[ni], cam), acfg, rng).view
        if cfg.frame_rotation:
            from .geom import orthonormalize

            R0 = orthonormalize(rng.standard_normal((3, 3)))
            q, p, n = (synth.rotate_frame(v, R0) for v in (q, p, n))
        if q.mask.sum() < 8 or p.mask.sum() < 8 or n.mask.sum() < 8:
            continue
        return obj, q, p, n
    raise NoEligiblePositive("no usable three-view sample after retries")


def train_step(model, batch, opt_state: AdamWState, lr: float, rng, with_refine=True):
    """One optimizer step over a batch of (obj, query, pos, neg) tuples."""
    cfg = model.cfg
    model.zero_grads()
    terms = {"coarse": 0.0, "fine": 0.0, "zoom": 0.0, "offset2d": 0.0}
    total_parts = []
    n_matches = n_padded = n_flagged = 0
    for obj, q, p, n in batch:
        s = sample_forward(model, obj, q, p, n, rng, with_refine)
        part = s.coarse
        terms["coarse"] += s.coarse.item()
        if s.fine is not None:
            part = ad.add(part, s.fine)
            terms["fine"] += s.fine.item()
        if s.zoom is not None:
            part = ad.add(part, ad.mul(ad.add(s.zoom, s.offset2d), cfg.alpha))
            terms["zoom"] += s.zoom.item()
            terms["offset2d"] += s.offset2d.item()
        total_parts.append(part)
        n_matches += s.n_matches
        n_padded += s.n_padded
        n_flagged += int(s.mask_too_small)
    total = total_parts[0]
    for part in total_parts[1:]:
        total = ad.add(total, part)
    total = ad.mul(total, 1.0 / len(batch))
    if not np.isfinite(total.item()):
        raise TrainingDiverged(f"loss is {total.item()}")
    ad.backward(total)
    adamw_step(model.params, model.grads(), opt_state, lr, weight_decay=cfg.weight_decay)
    stats = {k: v / len(batch) for k, v in terms.items()}
    stats.update(
        loss=total.item(), matches=n_matches / len(batch), padded=n_padded / len(batch),
        mask_too_small=n_flagged,
    )
    return stats


def _split_u128(x: int) -> list:
    return [float((x >> s) & 0xFFFFFFFF) for s in (0, 32, 64, 96)]


def _join_u128(parts) -> int:
    return sum(int(p) << s for p, s in zip(parts, (0, 32, 64, 96)))


def _rng_state_records(rng: np.random.Generator) -> dict:
    # 128-bit PCG64 words split into float64-exact 32-bit limbs, plus the
    # cached uint32 so the stream resumes mid-draw
    st = rng.bit_generator.state
    vec = (
        _split_u128(st["state"]["state"])
        + _split_u128(st["state"]["inc"])
        + [float(st["has_uint32"]), float(st["uinteger"])]
    )
    return {"rng.state": np.array(vec, dtype=np.float64)}


def _restore_rng(records: dict) -> np.random.Generator | None:
    if "rng.state" not in records or records["rng.state"].size != 10:
        return None
    vec = records["rng.state"]
    rng = np.random.default_rng(0)
    st = rng.bit_generator.state
    st["state"]["state"] = _join_u128(vec[0:4])
    st["state"]["inc"] = _join_u128(vec[4:8])
    st["has_uint32"] = int(vec[8])
    st["uinteger"] = int(vec[9])
    rng.bit_generator.state = st
    return rng


def opt_state_records(opt: AdamWState) -> dict:
    rec = {"opt.step": np.array(float(opt.step))}
    for k, v in opt.m.items():
        rec[f"opt.m.{k}"] = v
    for k, v in opt.v.items():
        rec[f"opt.v.{k}"] = v
    return rec


def restore_opt_state(records: dict) -> AdamWState:
    opt = AdamWState()
    opt.step = int(np.ravel(records.get("opt.step", np.array(0.0)))[0])
    for k, v in records.items():
        if k.startswith("opt.m."):
            opt.m[k[6:]] = v.copy()
        elif k.startswith("opt.v."):
            opt.v[k[6:]] = v.copy()
    return opt


def train(
    cfg: Config,
    out_dir: Path,
    objects: list | None = None,
    viewpoints: list | None = None,
    resume: Path | None = None,
    stop_epoch: int | None = None,
    log=print,
):
    """Full training run; writes checkpoint.bin and metrics.csv to out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if objects is None:
        objects = [make_object(cfg, i) for i in range(cfg.n_train_objects)]
    if viewpoints is None:
        viewpoints = [make_viewpoints(cfg, i) for i in range(len(objects))]

    steps_per_epoch = max(len(objects) * cfg.samples_per_object // cfg.batch_size, 1)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs

    start_epoch = 0
    if resume is not None:
        model, extra, start_epoch = load_checkpoint(resume, cfg)
        opt = restore_opt_state(extra)
        rng = _restore_rng(extra) or np.random.default_rng(cfg.seed + 1)
    else:
        model = PoseModel(cfg, np.random.default_rng(cfg.seed))
        opt = AdamWState()
        rng = np.random.default_rng(cfg.seed + 1)

    metrics_path = out_dir / "metrics.csv"
    write_header = not metrics_path.exists() or start_epoch == 0
    mf = open(metrics_path, "w" if write_header else "a", newline="")
    writer = csv.writer(mf)
    if write_header:
        writer.writerow(
            ["epoch", "step", "lr", "loss", "coarse", "fine", "zoom", "offset2d",
             "matches", "padded", "mask_too_small"]
        )

    step = opt.step
    last_epoch = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    for epoch in range(start_epoch, last_epoch):
        with_refine = epoch >= cfg.staged_matching_epochs
        epoch_stats = []
        for _ in range(steps_per_epoch):
            batch = []
            while len(batch) < cfg.batch_size:
                oi = int(rng.integers(0, len(objects)))
                try:
                    batch.append(draw_sample(cfg, objects[oi], viewpoints[oi], rng))
                except NoEligiblePositive:
                    continue
            lr = warmup_cosine_lr(step, cfg.base_lr, warmup_steps, total_steps)
            stats = train_step(model, batch, opt, lr, rng, with_refine)
            step += 1
            writer.writerow(
                [epoch, step, f"{lr:.3e}"]
                + [f"{stats[k]:.6f}" for k in ("loss", "coarse", "fine", "zoom", "offset2d")]
                + [f"{stats['matches']:.1f}", f"{stats['padded']:.1f}", stats["mask_too_small"]]
            )
            epoch_stats.append(stats)
        mf.flush()
        mean_loss = float(np.mean([s["loss"] for s in epoch_stats]))
        log(f"epoch {epoch}: loss {mean_loss:.4f} "
            f"(coarse {np.mean([s['coarse'] for s in epoch_stats]):.4f}, "
            f"matches {np.mean([s['matches'] for s in epoch_stats]):.1f})")
        extra = opt_state_records(opt)
        extra.update(_rng_state_records(rng))
        save_checkpoint(out_dir / "checkpoint.bin", model, extra, epoch=epoch + 1)
    mf.close()
    return model
