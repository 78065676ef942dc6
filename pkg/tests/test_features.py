"""Feature extractor contracts: map shapes and stride, locality of the fine
head, positional encoding structure, and gradient flow to the conv weights."""

import numpy as np
import pytest

from oneshot6d import ad, features
from oneshot6d.errors import ShapeMismatch
from oneshot6d.features import COARSE_STRIDE


def make_params(seed=0):
    return features.init_feature_params(np.random.default_rng(seed))


class TestExtract:
    def test_shapes(self):
        pyr = features.extract(make_params(), np.random.default_rng(0).uniform(0, 1, (32, 24, 3)))
        assert pyr.coarse_shape == (8, 6)
        assert pyr.fine_shape == (32, 24)
        assert pyr.coarse_flat.shape == (48, 64)
        assert pyr.fine_flat.shape == (32 * 24, 32)
        assert pyr.stride == COARSE_STRIDE

    def test_rejects_bad_dims(self):
        with pytest.raises(ShapeMismatch):
            features.extract(make_params(), np.zeros((30, 64, 3)))
        with pytest.raises(ShapeMismatch):
            features.extract(make_params(), np.zeros((64, 64)))

    def test_deterministic(self):
        img = np.random.default_rng(1).uniform(0, 1, (16, 16, 3))
        p = make_params()
        a = features.extract(p, img)
        b = features.extract(p, img)
        assert np.array_equal(a.coarse_flat.data, b.coarse_flat.data)

    def test_fine_head_is_local(self):
        # fine features at stride 1 see a small receptive field: a far-away
        # perturbation must not change them
        p = make_params()
        img = np.random.default_rng(2).uniform(0, 1, (32, 32, 3))
        base = features.extract(p, img).fine_flat.data
        img2 = img.copy()
        img2[28:, 28:] += 0.5
        pert = features.extract(p, img2).fine_flat.data
        assert np.allclose(base[: 10 * 32], pert[: 10 * 32], atol=1e-12)
        assert not np.allclose(base[-32:], pert[-32:])

    def test_gradients_reach_first_conv(self):
        p = make_params()
        img = np.random.default_rng(3).uniform(0, 1, (16, 16, 3))
        pyr = features.extract(p, img)
        loss = ad.add(ad.tmean(ad.power(pyr.coarse_flat, 2.0)),
                      ad.tmean(ad.power(pyr.fine_flat, 2.0)))
        ad.backward(loss)
        assert p["feat.c1.w"].grad is not None
        assert np.abs(p["feat.c1.w"].grad).max() > 0
        assert p["feat.f1.w"].grad is not None


class TestEncode2d:
    def test_additive_and_fixed(self):
        x = ad.Tensor(np.zeros((64, 64)))
        out = features.encode_2d(x, (8, 8))
        table = out.data
        y = ad.Tensor(np.ones((64, 64)))
        assert np.allclose(features.encode_2d(y, (8, 8)).data, table + 1.0)

    def test_disabled_passthrough(self):
        x = ad.Tensor(np.random.default_rng(0).standard_normal((64, 64)))
        assert features.encode_2d(x, (8, 8), enabled=False) is x

    def test_rows_distinguish_positions(self):
        t = features._sinusoidal_table(8, 8, 64)
        d = np.linalg.norm(t[:, None] - t[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        assert d.min() > 1e-3  # all 64 cells get distinct encodings

    def test_y_and_x_in_separate_halves(self):
        t = features._sinusoidal_table(8, 8, 64)
        # moving along x only changes the second half
        row0, row1 = t[0], t[1]  # same y, adjacent x
        assert np.allclose(row0[:32], row1[:32])
        assert not np.allclose(row0[32:], row1[32:])


class TestEncode3d:
    def test_shape_and_grad(self):
        p = make_params()
        pts = np.random.default_rng(1).uniform(-0.5, 0.5, (40, 3))
        out = features.encode_3d(p, pts)
        assert out.shape == (40, 64)
        ad.backward(ad.tmean(ad.power(out, 2.0)))
        assert p["pe3.w1"].grad is not None

    def test_distinct_points_distinct_codes(self):
        p = make_params()
        pts = np.array([[0.0, 0.0, 0.0], [0.3, -0.2, 0.1]])
        out = features.encode_3d(p, pts).data
        assert not np.allclose(out[0], out[1])
