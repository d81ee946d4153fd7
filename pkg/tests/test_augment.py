import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longissl.augment import (
    AffineDraw,
    AugmentParams,
    DownstreamAugmentParams,
    NormMode,
    NormStats,
    apply_affine,
    downstream_augment,
    downstream_augment_sequence,
    make_two_views,
    normalize,
    pretrain_augment,
    resize,
    rotation_matrix,
    scale_translation,
)
from longissl.data import ValidationError, Volume


def blob(shape=(16, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    g = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), -1).astype(np.float32)
    c = np.array(shape) / 2 + rng.uniform(-2, 2, 3)
    return np.exp(-((g - c) ** 2).sum(-1) / 20).astype(np.float32)


GEOMETRY_ONLY = AugmentParams(per_transform_prob=1.0, smooth_sigma_range=(0, 0), noise_std_range=(0, 0))


class TestPrimitives:
    def test_identity_affine(self):
        a = blob()
        np.testing.assert_allclose(apply_affine(a, AffineDraw(np.eye(3))), a, atol=1e-6)

    def test_integer_translation(self):
        a = blob()
        out = apply_affine(a, AffineDraw(np.eye(3), np.array([2.0, 0.0, 0.0])))
        np.testing.assert_allclose(out[2:], a[:-2], atol=1e-6)
        assert np.all(out[:2] == 0)

    def test_rotation_is_orthonormal(self):
        r = rotation_matrix([0.3, -0.2, 0.1])
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)

    def test_resize_shape(self):
        assert resize(blob((10, 12, 9)), (16, 16, 16)).shape == (16, 16, 16)
        a = blob()
        assert resize(a, a.shape) is a

    def test_translation_rescale(self):
        assert scale_translation(15, (32, 32, 32), (192, 192, 192)) == pytest.approx(2.5)


class TestPretrainAugment:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(2, 4), st.integers(0, 10_000))
    def test_shared_affine(self, n, seed):
        base = blob()
        seq = [base * (1 + 0.1 * i) for i in range(n)]
        out = pretrain_augment(seq, GEOMETRY_ONLY, np.random.default_rng(seed))
        # the same geometric map commutes with the per-timepoint intensity scaling
        for i, o in enumerate(out):
            np.testing.assert_allclose(o, out[0] * (1 + 0.1 * i), rtol=1e-5, atol=1e-6)

    def test_input_untouched_and_shapes(self):
        seq = [blob(seed=i) for i in range(3)]
        before = [s.copy() for s in seq]
        out = pretrain_augment(seq, AugmentParams(per_transform_prob=1.0), np.random.default_rng(0))
        assert [o.shape for o in out] == [s.shape for s in seq]
        for s, b in zip(seq, before):
            np.testing.assert_array_equal(s, b)

    def test_probability_zero_is_identity(self):
        seq = [blob(seed=i) for i in range(2)]
        out = pretrain_augment(seq, AugmentParams(per_transform_prob=0.0), np.random.default_rng(0))
        for a, b in zip(out, seq):
            np.testing.assert_array_equal(a, b)

    def test_seed_reproducible(self):
        seq = [Volume(blob(seed=i)) for i in range(3)]
        p = AugmentParams(per_transform_prob=1.0)
        a = make_two_views(seq, p, np.random.default_rng(3))
        b = make_two_views(seq, p, np.random.default_rng(3))
        for x, y in zip(a[0] + a[1], b[0] + b[1]):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(a[0][0], a[1][0])

    def test_mismatched_shapes(self):
        with pytest.raises(ValidationError):
            pretrain_augment([blob(), blob((8, 8, 8))], AugmentParams(), np.random.default_rng(0))

    def test_bad_params(self):
        with pytest.raises(ValidationError):
            AugmentParams(scale_range=(1.3, 0.9))
        with pytest.raises(ValidationError):
            AugmentParams(per_transform_prob=1.5)


class TestDownstreamAugment:
    def test_identity(self):
        a = blob()
        np.testing.assert_array_equal(downstream_augment(a, DownstreamAugmentParams.identity(), np.random.default_rng(0)), a)

    def test_flip_only(self):
        a = blob()
        p = DownstreamAugmentParams(crop_min_fraction=(1, 1, 1), flip_prob=1.0, affine_prob=0, shift_prob=0, noise_prob=0)
        np.testing.assert_array_equal(downstream_augment(a, p, np.random.default_rng(0)), a[:, :, ::-1])

    def test_shape_preserved(self):
        a = blob((16, 20, 20))
        for seed in range(5):
            assert downstream_augment(a, DownstreamAugmentParams(), np.random.default_rng(seed)).shape == a.shape

    def test_sequence_shares_geometry(self):
        a = blob()
        p = DownstreamAugmentParams(noise_prob=0, shift_prob=0, flip_prob=0.5, affine_prob=1.0)
        for seed in range(5):
            x, y = downstream_augment_sequence([a, 2 * a], p, np.random.default_rng(seed))
            np.testing.assert_allclose(y, 2 * x, rtol=1e-5, atol=1e-6)


class TestNormalize:
    def test_stats_and_zscore(self):
        vols = [np.full((2, 2, 2), 1.0, np.float32), np.full((2, 2, 2), 3.0, np.float32)]
        stats = NormStats.from_volumes(vols)
        assert (stats.train_mean, stats.train_std) == (2.0, 1.0)
        np.testing.assert_array_equal(normalize(vols[1], stats), np.ones((2, 2, 2)))
        np.testing.assert_array_equal(normalize(vols[1], stats, NormMode.STD_SUBTRACT), np.full((2, 2, 2), 2.0))

    def test_zero_std_rejected(self):
        with pytest.raises(ValidationError):
            NormStats(1.0, 0.0)
        with pytest.raises(ValidationError):
            NormStats.from_volumes([np.ones((2, 2, 2))])

    def test_matches_numpy(self):
        vols = [np.random.default_rng(i).normal(i, 1 + i, size=(3, 4, 5)).astype(np.float32) for i in range(3)]
        stats = NormStats.from_volumes(vols)
        cat = np.concatenate([v.ravel() for v in vols]).astype(np.float64)
        assert stats.train_mean == pytest.approx(cat.mean(), rel=1e-9)
        assert stats.train_std == pytest.approx(cat.std(), rel=1e-9)
