import numpy as np
import pytest

from stochsr.errors import DomainError, ShapeError
from stochsr.fields import FieldSequence, SequencePair, augment, make_pair
from stochsr.synthetic import SyntheticParams, synth_sequence
from stochsr.transforms import TransformSpec, downsample_coarse


def sample_sequence(n_t=3, h=32, w=32, seed=0):
    return synth_sequence(SyntheticParams(seed=seed), n_t, h, w)


class TestFieldSequence:
    def test_valid_construction(self):
        seq = sample_sequence()
        assert seq.n_t == 3
        assert seq.spatial_shape == (32, 32)
        assert seq.dt == 10.0

    def test_rejects_out_of_range_values(self):
        with pytest.raises(DomainError):
            FieldSequence(
                values=np.full((1, 2, 2, 1), 1.5, dtype=np.float32),
                timestamps=np.array([0.0]),
                pixel_size=1.0,
                transform=TransformSpec(),
            )

    def test_rejects_non_increasing_timestamps(self):
        with pytest.raises(DomainError):
            FieldSequence(
                values=np.zeros((2, 2, 2, 1), dtype=np.float32),
                timestamps=np.array([10.0, 10.0]),
                pixel_size=1.0,
                transform=TransformSpec(),
            )

    def test_rejects_bad_mask_shape(self):
        with pytest.raises(ShapeError):
            FieldSequence(
                values=np.zeros((1, 4, 4, 1), dtype=np.float32),
                timestamps=np.array([0.0]),
                pixel_size=1.0,
                transform=TransformSpec(),
                mask=np.ones((2, 2), dtype=bool),
            )


class TestSequencePair:
    def test_make_pair_shapes(self):
        pair = make_pair(sample_sequence(), 16)
        assert pair.lr.spatial_shape == (2, 2)
        assert pair.lr.pixel_size == 16.0
        np.testing.assert_array_equal(pair.hr.timestamps, pair.lr.timestamps)

    def test_mismatched_dims_rejected(self):
        hr = sample_sequence()
        lr = sample_sequence(h=4, w=4)
        with pytest.raises(ShapeError):
            SequencePair(hr=hr, lr=lr, factor=16)

    def test_smoothing_applied_to_hr_only(self):
        raw = sample_sequence()
        smoothed = make_pair(raw, 16, smooth_sigma=0.75)
        plain = make_pair(raw, 16)
        assert not np.array_equal(smoothed.hr.values, plain.hr.values)
        np.testing.assert_array_equal(smoothed.lr.values, plain.lr.values)


class TestAugment:
    def test_identity(self):
        pair = make_pair(sample_sequence(), 16)
        out = augment(pair, 0, False)
        np.testing.assert_array_equal(out.hr.values, pair.hr.values)

    def test_half_turn_twice_is_identity(self):
        pair = make_pair(sample_sequence(), 16)
        out = augment(augment(pair, 2, False), 2, False)
        np.testing.assert_array_equal(out.hr.values, pair.hr.values)
        np.testing.assert_array_equal(out.lr.values, pair.lr.values)

    def test_multiset_preserved(self):
        pair = make_pair(sample_sequence(), 16)
        for turns in range(4):
            for mirror in (False, True):
                out = augment(pair, turns, mirror)
                np.testing.assert_array_equal(
                    np.sort(out.hr.values, axis=None),
                    np.sort(pair.hr.values, axis=None),
                )

    def test_non_square_quarter_turn_rejected(self):
        pair = make_pair(sample_sequence(h=32, w=64), 16)
        with pytest.raises(ShapeError):
            augment(pair, 1, False)
        augment(pair, 2, True)  # half turns stay legal

    def test_commutes_with_downsampling(self):
        hr = sample_sequence()
        pair = make_pair(hr, 16)
        for turns in range(4):
            for mirror in (False, True):
                out = augment(pair, turns, mirror)
                recomputed = downsample_coarse(
                    out.hr.linear_values(), 16, hr.transform
                )
                np.testing.assert_allclose(
                    recomputed, out.lr.values, rtol=1e-5, atol=1e-7
                )
