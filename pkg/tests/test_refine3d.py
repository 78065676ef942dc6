"""Pose-update algebra: zoom bin layout, crop geometry, the multiplicative
delta (perturb, recover, invert), sampled training noise, and the head."""

import numpy as np
import pytest

from oneshot6d import ad, refine3d
from oneshot6d.errors import NonPositiveZoom, ShapeMismatch
from oneshot6d.geom import Camera, Pose, orthonormalize
from oneshot6d.refine3d import (
    CropBox,
    PoseDelta,
    apply_pose_delta,
    gt_pose_delta,
    mask_crop_box,
    sample_training_perturbation,
    zoom_bin_centers,
)

CAM = Camera(fx=70.0, fy=70.0, cx=32.0, cy=32.0, width=64, height=64)
BOX = CropBox(10.0, 8.0, 40.0)


def random_pose(seed):
    rng = np.random.default_rng(seed)
    R = orthonormalize(rng.standard_normal((3, 3)))
    t = np.array([0.0, 0.0, 2.5]) + rng.uniform(-0.3, 0.3, 3)
    return Pose(R, t)


class TestZoomBins:
    def test_count_and_range(self):
        c = zoom_bin_centers()
        assert c.shape == (100,)
        assert c[0] == pytest.approx(0.7)
        assert c[-1] == pytest.approx(1.43)

    def test_log_uniform_spacing(self):
        c = zoom_bin_centers()
        ratios = c[1:] / c[:-1]
        assert np.allclose(ratios, ratios[0], rtol=1e-12)

    def test_monotone_increasing(self):
        c = zoom_bin_centers(50, 0.8, 1.2)
        assert np.all(np.diff(c) > 0)


class TestCropBox:
    def test_normalize_roundtrip(self):
        uv = np.random.default_rng(0).uniform(0, 64, (20, 2))
        assert np.allclose(BOX.denormalize(BOX.normalize(uv)), uv, atol=1e-12)

    def test_corners_map_to_unit_square(self):
        assert np.allclose(BOX.normalize(np.array([[10.0, 8.0]]))[0], [0, 0])
        assert np.allclose(BOX.normalize(np.array([[50.0, 48.0]]))[0], [1, 1])

    def test_mask_crop_box_covers_mask(self):
        mask = np.zeros((64, 64), bool)
        mask[20:30, 15:40] = True
        box = mask_crop_box(mask)
        v, u = np.nonzero(mask)
        n = box.normalize(np.stack([u, v], 1).astype(float))
        assert n.min() > 0.0 and n.max() < 1.0


class TestPoseDelta:
    def test_rejects_nonpositive_zoom(self):
        with pytest.raises(NonPositiveZoom):
            PoseDelta(dz=0.0, d2d=np.ones(2))
        with pytest.raises(NonPositiveZoom):
            PoseDelta(dz=-1.0, d2d=np.ones(2))

    def test_identity_delta_is_noop(self):
        pose = random_pose(1)
        out = apply_pose_delta(pose, PoseDelta(1.0, np.ones(2)), CAM, BOX)
        assert np.allclose(out.R, pose.R)
        assert np.allclose(out.t, pose.t, atol=1e-12)

    def test_zoom_scales_depth_only_at_center(self):
        # object centered in the crop: depth scales, projection is preserved
        pose = Pose(np.eye(3), np.array([0.0, 0.0, 2.0]))
        out = apply_pose_delta(pose, PoseDelta(1.2, np.ones(2)), CAM, BOX)
        assert out.t[2] == pytest.approx(2.4)
        p0 = refine3d.centroid_norm(pose, CAM, BOX)
        p1 = refine3d.centroid_norm(out, CAM, BOX)
        assert np.allclose(p0, p1, atol=1e-12)

    def test_rotation_never_changes(self):
        pose = random_pose(2)
        out = apply_pose_delta(pose, PoseDelta(0.8, np.array([1.1, 0.9])), CAM, BOX)
        assert np.allclose(out.R, pose.R)

    def test_perturb_then_invert_many(self):
        # apply a random delta, recover it from the pose pair, invert: the
        # recovered delta must rebuild the original pose to 1e-9
        rng = np.random.default_rng(0)
        worst = 0.0
        for i in range(1000):
            pose = random_pose(i)
            delta = PoseDelta(
                dz=float(np.exp(rng.uniform(-0.3, 0.3))),
                d2d=1.0 + rng.uniform(-0.2, 0.2, 2),
            )
            moved = apply_pose_delta(pose, delta, CAM, BOX)
            rec = gt_pose_delta(pose, moved, CAM, BOX)
            assert rec.dz == pytest.approx(delta.dz, abs=1e-9)
            back = apply_pose_delta(
                moved, PoseDelta(1.0 / rec.dz, 1.0 / rec.d2d), CAM, BOX
            )
            worst = max(worst, float(np.abs(back.t - pose.t).max()))
        assert worst < 1e-9

    def test_gt_delta_reaches_target(self):
        pose0, gt = random_pose(3), random_pose(4)
        gt = Pose(pose0.R, gt.t)  # delta only explains translation
        delta = gt_pose_delta(pose0, gt, CAM, BOX)
        out = apply_pose_delta(pose0, delta, CAM, BOX)
        assert np.allclose(out.t, gt.t, atol=1e-9)


class TestSampledPerturbation:
    def test_noise_matches_recovered_delta(self):
        rng = np.random.default_rng(5)
        for i in range(50):
            gt = random_pose(i + 100)
            pose0, eps = sample_training_perturbation(gt, CAM, BOX, rng)
            assert np.allclose(
                apply_pose_delta(pose0, eps, CAM, BOX).t, gt.t, atol=1e-9
            )
            rec = gt_pose_delta(pose0, gt, CAM, BOX)
            assert rec.dz == pytest.approx(eps.dz, abs=1e-9)
            assert np.allclose(rec.d2d, eps.d2d, atol=1e-9)

    def test_zoom_stays_in_class_range(self):
        rng = np.random.default_rng(6)
        lo, hi = refine3d.ZOOM_RANGE
        for i in range(200):
            _, eps = sample_training_perturbation(random_pose(i), CAM, BOX, rng)
            assert lo <= eps.dz <= hi


class TestRefineHead:
    def make_input(self, seed=0, hc=16, wc=16):
        rng = np.random.default_rng(seed)
        return refine3d.RefineInput(
            grid=ad.Tensor(rng.standard_normal((4, hc, wc))),
            offsets=ad.Tensor(rng.standard_normal((5, 2))),
            variances=ad.Tensor(rng.uniform(0.1, 1.0, 5)),
            cells=np.arange(5),
            clamped=np.zeros(5, bool),
        )

    def make_params(self, seed=0, k=100):
        params = {}
        refine3d.init_refine_head_params(np.random.default_rng(seed), params, k)
        return params

    def test_output_shapes_and_zoom_range(self):
        out = refine3d.refine_head_forward(self.make_input(), self.make_params())
        assert out.d2d.shape == (2,)
        assert out.zoom_logits.shape == (100,)
        lo, hi = refine3d.ZOOM_RANGE
        assert lo <= float(out.dz.data) <= hi  # expectation over bin centers

    def test_delta_construction(self):
        out = refine3d.refine_head_forward(self.make_input(1), self.make_params(1))
        d = out.delta()
        assert isinstance(d, PoseDelta)

    def test_wrong_grid_channels_rejected(self):
        bad = self.make_input()
        bad = refine3d.RefineInput(
            grid=ad.Tensor(np.zeros((3, 16, 16))),
            offsets=bad.offsets, variances=bad.variances,
            cells=bad.cells, clamped=bad.clamped,
        )
        with pytest.raises(ShapeMismatch):
            refine3d.refine_head_forward(bad, self.make_params())

    def test_losses_zero_at_truth(self):
        out = refine3d.refine_head_forward(self.make_input(2), self.make_params(2))
        gt = PoseDelta(float(out.dz.data), out.d2d.data.copy())
        l_z, l_2d = refine3d.refine_losses(out, gt)
        assert l_z.item() == pytest.approx(0.0, abs=1e-15)
        assert l_2d.item() == pytest.approx(0.0, abs=1e-15)

    def test_total_loss_weighting(self):
        one = ad.Tensor(np.array(1.0))
        total = refine3d.total_loss(one, one, one, one, alpha=100.0)
        assert total.item() == pytest.approx(202.0)
        with pytest.raises(ValueError):
            refine3d.total_loss(one, one, one, one, alpha=-1.0)
