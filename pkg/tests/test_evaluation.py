import numpy as np
import pytest
import torch

from stochsr.archive import synthesize_archive
from stochsr.errors import DomainError
from stochsr.evaluation import (
    MetricReport,
    evaluate_suite,
    evaluate_with_tally,
    generate_ensemble,
    load_rank_tally,
    save_rank_tally,
)
from stochsr.fields import FieldSequence
from stochsr.metrics import RankTally
from stochsr.nets import Generator, tiny_config
from stochsr.synthetic import SyntheticParams
from stochsr.transforms import TransformSpec

torch.manual_seed(1)
GEN = Generator(tiny_config()).eval()


def condition(n_t=2, h=2, w=2, seed=0):
    rng = np.random.default_rng(seed)
    return FieldSequence(
        values=rng.uniform(0.2, 0.9, size=(n_t, h, w, 1)).astype(np.float32),
        timestamps=10.0 * np.arange(n_t, dtype=np.float64),
        pixel_size=16.0,
        transform=TransformSpec(),
    )


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return synthesize_archive(
        tmp_path_factory.mktemp("eval") / "ds",
        n_sequences=6,
        n_t=2,
        h=32,
        w=32,
        params=SyntheticParams(corr_length=4.0),
        seed=0,
        test_fraction=0.5,
    )


class TestGenerateEnsemble:
    def test_single_member(self):
        block = generate_ensemble(GEN, condition(), 1, np.random.default_rng(0))
        assert block.n_members == 1
        assert block.members.shape == (1, 2, 32, 32, 1)

    def test_fixed_seed_reproducible(self):
        a = generate_ensemble(GEN, condition(), 5, np.random.default_rng(42))
        b = generate_ensemble(GEN, condition(), 5, np.random.default_rng(42))
        np.testing.assert_array_equal(a.members, b.members)

    def test_zero_amplitude_collapses_members(self):
        block = generate_ensemble(
            GEN, condition(), 4, np.random.default_rng(0), noise_amplitude=0.0
        )
        for k in range(1, 4):
            np.testing.assert_array_equal(block.members[k], block.members[0])

    def test_members_differ_with_noise(self):
        block = generate_ensemble(GEN, condition(), 3, np.random.default_rng(1))
        assert not np.array_equal(block.members[0], block.members[1])

    def test_member_batching_invariant(self):
        a = generate_ensemble(
            GEN, condition(), 5, np.random.default_rng(7), member_batch=2
        )
        b = generate_ensemble(
            GEN, condition(), 5, np.random.default_rng(7), member_batch=5
        )
        np.testing.assert_allclose(a.members, b.members, atol=1e-6)

    def test_member_sequence_view(self):
        block = generate_ensemble(GEN, condition(), 2, np.random.default_rng(2))
        seq = block.member_sequence(0)
        assert seq.spatial_shape == (32, 32)
        assert seq.pixel_size == pytest.approx(1.0)


class TestEvaluateSuite:
    def test_report_fields_finite(self, dataset):
        report = evaluate_suite(
            GEN, dataset, split="test", n_members=4, seed=0, smooth_sigma=0.0
        )
        for key, value in report.finite_fields().items():
            assert np.isfinite(value), key
        assert report.n_members == 4
        assert report.n_samples == 3

    def test_reproducible_under_seed(self, dataset):
        kwargs = dict(split="test", n_members=3, seed=5, smooth_sigma=0.0)
        a = evaluate_suite(GEN, dataset, **kwargs)
        b = evaluate_suite(GEN, dataset, **kwargs)
        assert a == b

    def test_crps_equals_mae_for_single_member(self, dataset):
        report = evaluate_suite(
            GEN, dataset, split="test", n_members=1, seed=0, smooth_sigma=0.0
        )
        # recompute the mean absolute error through the same canonical path
        from stochsr.evaluation import sample_seed
        from stochsr.fields import make_pair
        from stochsr.transforms import canonicalize

        maes = []
        for index, record in enumerate(dataset.split_records("test")):
            rng = sample_seed(0, index)
            pair = make_pair(dataset.load(record), 16, smooth_sigma=0.0)
            block = generate_ensemble(GEN, pair.lr, 1, rng, truth=pair.hr)
            truth_c = canonicalize(pair.hr.values.astype(np.float64), pair.hr.transform)
            member_c = canonicalize(
                block.members[0].astype(np.float64), pair.hr.transform
            )
            maes.append(np.mean(np.abs(member_c - truth_c)))
        assert report.crps == pytest.approx(np.mean(maes), rel=1e-9)

    def test_self_consistency_null(self):
        # truth drawn as an extra ensemble member: ranks must be near-uniform.
        # One pixel per independent condition keeps the draws uncorrelated
        # (pixels within one generated frame are strongly correlated).
        from stochsr.metrics import ks_statistic, normalized_rank

        n_ens, m = 400, 8
        rng = np.random.default_rng(0)
        tally = RankTally(m)
        conditions = torch.from_numpy(
            rng.uniform(0.2, 0.9, size=(n_ens, 1, 1, 2, 2)).astype(np.float32)
        )
        lr = conditions.repeat_interleave(m + 1, dim=0)
        noise = torch.from_numpy(
            rng.standard_normal(
                (n_ens * (m + 1), 1, GEN.config.noise_channels, 2, 2)
            ).astype(np.float32)
        )
        outputs = []
        with torch.no_grad():
            for lo in range(0, lr.shape[0], 512):
                hr, _ = GEN(lr[lo : lo + 512], noise[lo : lo + 512])
                outputs.append(hr[:, 0, 0, 16, 16].numpy())
        values = np.concatenate(outputs).reshape(n_ens, m + 1)
        tally.add_ranks(normalized_rank(values[:, :m].T, values[:, m], rng))
        assert ks_statistic(tally) <= 0.1

    def test_empty_split_rejected(self, dataset):
        with pytest.raises(DomainError):
            evaluate_suite(GEN, dataset, split="valid", n_members=2)


class TestMetricReportIO:
    def test_text_round_trip(self):
        report = MetricReport(
            rmse=0.1, ms_ssim=0.9, lsd_db=8.0, crps=None, ks=0.02,
            d_kl=0.001, outlier_fraction=0.05, mean_rank=0.5,
            n_members=10, n_samples=3, seconds_per_sequence=0.66,
        )
        again = MetricReport.from_text(report.to_text())
        assert again == report

    def test_absent_fields_marked(self):
        text = MetricReport(rmse=0.5).to_text()
        assert "crps = ---" in text

    def test_file_round_trip(self, tmp_path):
        report = MetricReport(rmse=0.25, n_samples=2)
        report.save(tmp_path / "report.txt")
        assert MetricReport.load(tmp_path / "report.txt") == report


def test_rank_tally_io(tmp_path):
    tally = RankTally(4, counts=np.array([1, 2, 3, 4, 5]))
    save_rank_tally(tally, tmp_path / "tally.json")
    loaded = load_rank_tally(tmp_path / "tally.json")
    assert loaded.n_members == 4
    np.testing.assert_array_equal(loaded.counts, tally.counts)


def test_evaluate_with_tally_consistency(dataset):
    report, tally = evaluate_with_tally(
        GEN, dataset, split="test", n_members=3, seed=1, smooth_sigma=0.0
    )
    assert tally.total > 0
    from stochsr.metrics import ks_statistic

    assert report.ks == pytest.approx(ks_statistic(tally))
