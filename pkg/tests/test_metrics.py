import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    crps_by_integration,
    lsd_by_periodogram,
    ms_ssim_reference,
    rank_statistics_by_counting,
)
from stochsr.errors import DomainError, ShapeError
from stochsr.metrics import (
    RankTally,
    crps,
    crps_image,
    kl_divergence,
    ks_statistic,
    lsd,
    max_msssim_scales,
    mean_rank,
    ms_ssim,
    normalized_rank,
    outlier_fraction,
    rmse,
)


class TestRMSE:
    def test_identical_zero(self):
        x = np.random.default_rng(0).uniform(size=(8, 8))
        assert rmse(x, x) == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(1).uniform(0, 0.5, size=(8, 8))
        assert rmse(x, x + 0.25) == pytest.approx(0.25, rel=1e-12)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(4, 4)), rng.uniform(size=(4, 4))
        expected = np.sqrt(sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(4)) / 16)
        assert rmse(a, b) == pytest.approx(expected, rel=1e-12)


class TestMSSSIM:
    def test_identical_is_one(self):
        x = np.random.default_rng(3).uniform(size=(48, 48))
        assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(48, 48)), rng.uniform(size=(48, 48))
        assert ms_ssim(a, b) == pytest.approx(ms_ssim(b, a), rel=1e-12)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(5)
        base = rng.uniform(size=(32, 32))
        noisy = np.clip(base + 0.1 * rng.standard_normal((32, 32)), 0, 1)
        mine = ms_ssim(base, noisy, scales=2)
        ref = ms_ssim_reference(base, noisy, scales=2)
        assert mine == pytest.approx(ref, abs=1e-9)

    def test_scale_count_adaptive(self):
        assert max_msssim_scales((176, 176)) == 5
        assert max_msssim_scales((64, 64)) == 3
        assert max_msssim_scales((11, 11)) == 1

    def test_too_small_image_suggests_fewer_scales(self):
        x = np.zeros((32, 32))
        with pytest.raises(DomainError, match="scales<="):
            ms_ssim(x, x, scales=5)
        with pytest.raises(DomainError):
            ms_ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_distinct_images_below_one(self):
        rng = np.random.default_rng(6)
        a = rng.uniform(size=(48, 48))
        assert ms_ssim(a, 1.0 - a) < 0.9


class TestLSD:
    def test_identical_zero(self):
        x = np.random.default_rng(7).uniform(size=(16, 16))
        assert lsd(x, x) == pytest.approx(0.0, abs=1e-9)

    def test_constant_power_ratio(self):
        # scaling a zero-mean field by sqrt(10) scales every bin's power by 10
        rng = np.random.default_rng(8)
        x = rng.standard_normal((32, 32))
        scaled = x * np.sqrt(10.0)
        assert lsd(scaled, x) == pytest.approx(10.0, rel=1e-9)

    def test_matches_periodogram_oracle(self):
        rng = np.random.default_rng(9)
        a = rng.uniform(size=(3, 16, 16))
        b = rng.uniform(size=(3, 16, 16))
        assert lsd(a, b) == pytest.approx(lsd_by_periodogram(a, b), abs=1e-9)


class TestCRPS:
    def test_single_member_is_absolute_error(self):
        assert crps(np.array([0.3]), 0.7) == pytest.approx(0.4, rel=1e-12)

    def test_two_member_bracket(self):
        assert crps(np.array([0.0, 1.0]), 0.5) == pytest.approx(0.25, abs=1e-12)

    def test_all_members_equal_obs(self):
        assert crps(np.array([0.4, 0.4, 0.4]), 0.4) == pytest.approx(0.0, abs=1e-12)

    def test_matches_integration_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(200):
            m = int(rng.integers(1, 11))
            ens = rng.uniform(size=m)
            obs = rng.uniform()
            assert crps(ens, obs) == pytest.approx(
                crps_by_integration(ens, obs), abs=1e-6
            )

    @settings(max_examples=100, deadline=None)
    @given(
        ens=st.lists(
            st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
            min_size=1,
            max_size=10,
        ),
        obs=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
    )
    def test_closed_form_equals_integral_property(self, ens, obs):
        ens = np.array(ens)
        assert crps(ens, obs) == pytest.approx(
            crps_by_integration(ens, obs), abs=1e-6
        )

    def test_vectorized_over_pixels(self):
        rng = np.random.default_rng(11)
        ens = rng.uniform(size=(5, 4, 4))
        obs = rng.uniform(size=(4, 4))
        per_pixel = crps(ens, obs)
        for i in range(4):
            for j in range(4):
                assert per_pixel[i, j] == pytest.approx(
                    crps(ens[:, i, j], obs[i, j]), rel=1e-10
                )
        assert crps_image(ens, obs) == pytest.approx(per_pixel.mean(), rel=1e-12)

    def test_adding_perfect_member_improves_degenerate_ensemble(self):
        obs = 0.8
        far = np.array([0.1, 0.1])
        better = np.array([0.1, 0.1, obs])
        assert crps(better, obs) < crps(far, obs)


class TestNormalizedRank:
    def test_definition(self):
        rng = np.random.default_rng(12)
        r = normalized_rank(np.array([1.0, 2.0, 3.0]), np.array(2.5), rng)
        assert r == pytest.approx(2 / 3)

    def test_truth_below_all(self):
        rng = np.random.default_rng(13)
        assert normalized_rank(np.array([1.0, 2.0]), np.array(0.5), rng) == 0.0

    def test_ties_randomized_uniformly(self):
        rng = np.random.default_rng(14)
        draws = [
            float(normalized_rank(np.full(4, 0.3), np.array(0.3), rng))
            for _ in range(20000)
        ]
        values, counts = np.unique(draws, return_counts=True)
        np.testing.assert_allclose(values, [0.0, 0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(counts / len(draws), 0.2, atol=0.015)

    def test_array_broadcasting(self):
        rng = np.random.default_rng(15)
        ens = np.random.default_rng(0).uniform(size=(6, 3, 3))
        truth = np.random.default_rng(1).uniform(size=(3, 3))
        r = normalized_rank(ens, truth, rng)
        assert r.shape == (3, 3)
        assert np.all((r >= 0) & (r <= 1))


class TestRankTallyStatistics:
    def test_uniform_tally(self):
        tally = RankTally(4, counts=np.full(5, 100))
        assert ks_statistic(tally) == pytest.approx(0.0, abs=1e-12)
        assert kl_divergence(tally) == pytest.approx(0.0, abs=1e-12)
        assert outlier_fraction(tally) == pytest.approx(2 / 5)
        assert mean_rank(tally) == pytest.approx(0.5)

    def test_all_mass_at_zero(self):
        counts = np.zeros(21, dtype=int)
        counts[0] = 500
        tally = RankTally(20, counts=counts)
        assert ks_statistic(tally) == pytest.approx(20 / 21, rel=1e-12)
        assert outlier_fraction(tally) == 1.0

    def test_all_mass_at_one(self):
        counts = np.zeros(5, dtype=int)
        counts[-1] = 7
        tally = RankTally(4, counts=counts)
        assert outlier_fraction(tally) == 1.0
        assert mean_rank(tally) == 1.0

    def test_empty_bin_finite_divergence(self):
        counts = np.array([10, 0, 10])
        tally = RankTally(2, counts=counts)
        assert np.isfinite(kl_divergence(tally))

    def test_two_bin_hand_sum(self):
        counts = np.array([3, 1])
        tally = RankTally(1, counts=counts)
        # KL with pseudo-counts: q = (4/6, 2/6), p = 1/2 each
        expected = 0.5 * np.log(0.5 / (4 / 6)) + 0.5 * np.log(0.5 / (2 / 6))
        assert kl_divergence(tally) == pytest.approx(expected, rel=1e-12)

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(16)
        counts = rng.integers(0, 50, size=13)
        counts[3] = 0
        tally = RankTally(12, counts=counts)
        ks_o, kl_o, of_o, mean_o = rank_statistics_by_counting(counts)
        assert ks_statistic(tally) == pytest.approx(ks_o, abs=1e-12)
        assert kl_divergence(tally) == pytest.approx(kl_o, abs=1e-12)
        assert outlier_fraction(tally) == pytest.approx(of_o, abs=1e-12)
        assert mean_rank(tally) == pytest.approx(mean_o, abs=1e-12)

    def test_ks_bounded(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            counts = rng.integers(0, 100, size=8)
            counts[0] += 1  # avoid the all-empty tally
            tally = RankTally(7, counts=counts)
            assert 0.0 <= ks_statistic(tally) <= 1.0

    def test_permutation_invariance_of_member_order(self):
        rng = np.random.default_rng(18)
        ens = rng.uniform(size=(8, 5, 5))
        truth = rng.uniform(size=(5, 5))
        t1, t2 = RankTally(8), RankTally(8)
        t1.add_ranks(normalized_rank(ens, truth, np.random.default_rng(0)))
        perm = rng.permutation(8)
        t2.add_ranks(normalized_rank(ens[perm], truth, np.random.default_rng(0)))
        np.testing.assert_array_equal(t1.counts, t2.counts)

    def test_add_ranks_accumulates(self):
        tally = RankTally(2)
        tally.add_ranks(np.array([0.0, 0.5, 1.0, 0.5]))
        np.testing.assert_array_equal(tally.counts, [1, 2, 1])
        assert tally.total == 4

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            RankTally(4, counts=np.zeros(3))
        with pytest.raises(DomainError):
            RankTally(0)
