"""Ensemble generation and dataset-level metric aggregation.

Metrics are computed in the unit-interval representation after canonical
thresholding: values below the transform threshold are treated as empty (0)
in both the truth and the generated members, mirroring how stored data encode
emptiness. Single-image metrics use ensemble member 0; the probabilistic
metrics use the whole ensemble.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np
import torch

from .archive import DatasetManifest
from .errors import DomainError
from .fields import FieldSequence, make_pair
from .metrics import (
    RankTally,
    crps_image,
    kl_divergence,
    ks_statistic,
    lsd,
    mean_rank,
    ms_ssim,
    normalized_rank,
    outlier_fraction,
    rmse,
)
from .nets import Generator, NoiseBlock
from .transforms import canonicalize


@dataclass
class EnsembleBlock:
    """Stacked generated sequences sharing one low-resolution condition."""

    members: np.ndarray                  # (n_members, n_t, h, w, n_v)
    condition: FieldSequence
    truth: FieldSequence | None = None

    def __post_init__(self):
        self.members = np.asarray(self.members, dtype=np.float32)
        if self.members.ndim != 5 or self.members.shape[0] < 1:
            raise DomainError("members must be (n_members, n_t, h, w, n_v)")

    @property
    def n_members(self) -> int:
        return self.members.shape[0]

    def member_sequence(self, index: int) -> FieldSequence:
        upscale = self.members.shape[2] // self.condition.spatial_shape[0]
        return FieldSequence(
            values=self.members[index],
            timestamps=self.condition.timestamps,
            pixel_size=self.condition.pixel_size / upscale,
            transform=self.condition.transform,
        )


def _condition_tensor(condition: FieldSequence, device) -> torch.Tensor:
    return (
        torch.from_numpy(condition.values).permute(0, 3, 1, 2).unsqueeze(0).to(device)
    )


def generate_ensemble(
    generator: Generator,
    condition: FieldSequence,
    n_members: int,
    rng: np.random.Generator,
    *,
    noise_amplitude: float = 1.0,
    truth: FieldSequence | None = None,
    member_batch: int = 16,
    device: str = "cpu",
) -> EnsembleBlock:
    """Re-evaluate the generator with fresh noise draws to build an ensemble."""
    if n_members < 1:
        raise DomainError("need at least one ensemble member")
    generator = generator.to(device).eval()
    h, w = condition.spatial_shape
    n_t = condition.n_t
    zc = generator.config.noise_channels
    lr = _condition_tensor(condition, device)
    outputs = []
    with torch.no_grad():
        for lo in range(0, n_members, member_batch):
            count = min(member_batch, n_members - lo)
            noise = torch.stack(
                [
                    NoiseBlock.draw(rng, n_t, h, w, zc, noise_amplitude)
                    .tensor(device)
                    .squeeze(0)
                    for _ in range(count)
                ]
            )
            hr, _ = generator(lr.expand(count, -1, -1, -1, -1), noise)
            outputs.append(hr.permute(0, 1, 3, 4, 2).cpu().numpy())
    members = np.concatenate(outputs, axis=0)
    return EnsembleBlock(members=members, condition=condition, truth=truth)


@dataclass
class MetricReport:
    """Aggregated quality and calibration metrics for one dataset split.

    Ensemble-only fields are None for deterministic methods.
    """

    rmse: float | None = None
    ms_ssim: float | None = None
    lsd_db: float | None = None
    crps: float | None = None
    ks: float | None = None
    d_kl: float | None = None
    outlier_fraction: float | None = None
    mean_rank: float | None = None
    n_members: int | None = None
    n_samples: int | None = None
    seconds_per_sequence: float | None = None

    def to_text(self) -> str:
        lines = []
        for f in dc_fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'---' if value is None else repr(value)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        kwargs = {}
        for line in text.strip().splitlines():
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if raw == "---":
                kwargs[key] = None
            elif key in ("n_members", "n_samples"):
                kwargs[key] = int(raw)
            else:
                kwargs[key] = float(raw)
        return cls(**kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), "utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_text(Path(path).read_text("utf-8"))

    def finite_fields(self) -> dict[str, float]:
        return {
            f.name: getattr(self, f.name)
            for f in dc_fields(self)
            if getattr(self, f.name) is not None
        }


def sample_seed(seed: int, index: int) -> np.random.Generator:
    """Per-sample generator that does not depend on evaluation order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _metric_frames(values: np.ndarray) -> np.ndarray:
    """(n_t, h, w, n_v) -> (n_t * n_v, h, w) stack of single frames."""
    return np.moveaxis(values, -1, 1).reshape(-1, *values.shape[1:3])


@dataclass
class SampleScores:
    rmse: float
    ms_ssim: float
    lsd_db: float
    crps: float


def score_ensemble(
    block: EnsembleBlock,
    truth: FieldSequence,
    tally: RankTally | None = None,
    rng: np.random.Generator | None = None,
) -> SampleScores:
    """Score one ensemble against its truth; single-image metrics use member 0.

    When a tally is given, the pixelwise CRPS is computed and normalized ranks
    are accumulated; without one (deterministic single-member methods) the
    ensemble metrics are skipped.
    """
    spec = truth.transform
    truth_c = canonicalize(truth.values.astype(np.float64), spec)
    members_c = canonicalize(block.members.astype(np.float64), spec)
    first = members_c[0]
    frames_t = _metric_frames(truth_c)
    frames_m = _metric_frames(first)
    msv = float(np.mean([ms_ssim(a, b) for a, b in zip(frames_t, frames_m)]))
    scores = SampleScores(
        rmse=rmse(truth_c, first),
        ms_ssim=msv,
        lsd_db=lsd(frames_t, frames_m),
        crps=float("nan"),
    )
    if tally is not None:
        if rng is None:
            raise DomainError("rank accumulation needs a random generator")
        scores.crps = crps_image(members_c, truth_c)
        tally.add_ranks(normalized_rank(members_c, truth_c, rng))
    return scores


def evaluate_with_tally(
    generator: Generator,
    manifest: DatasetManifest,
    *,
    split: str = "valid",
    n_members: int = 100,
    seed: int = 0,
    noise_amplitude: float = 1.0,
    max_samples: int | None = None,
    smooth_sigma: float = 0.75,
    device: str = "cpu",
) -> tuple[MetricReport, RankTally]:
    """Aggregate every metric over one dataset split, deterministic under seed.

    Per-sample randomness derives from (seed, sample index), so the report is
    independent of evaluation order or worker count. Returns the report and
    the pooled rank tally (pooled over all pixels and frames of the split).
    """
    records = manifest.split_records(split)
    if max_samples is not None:
        records = records[:max_samples]
    if not records:
        raise DomainError(f"no sequences in split {split!r}")
    factor = generator.config.factor
    tally = RankTally(n_members)
    per_sample: list[SampleScores] = []
    for index, record in enumerate(records):
        rng = sample_seed(seed, index)
        pair = make_pair(manifest.load(record), factor, smooth_sigma=smooth_sigma)
        block = generate_ensemble(
            generator,
            pair.lr,
            n_members,
            rng,
            noise_amplitude=noise_amplitude,
            truth=pair.hr,
            device=device,
        )
        per_sample.append(score_ensemble(block, pair.hr, tally, rng))
    report = MetricReport(
        rmse=float(np.mean([s.rmse for s in per_sample])),
        ms_ssim=float(np.mean([s.ms_ssim for s in per_sample])),
        lsd_db=float(np.mean([s.lsd_db for s in per_sample])),
        crps=float(np.mean([s.crps for s in per_sample])),
        ks=ks_statistic(tally),
        d_kl=kl_divergence(tally),
        outlier_fraction=outlier_fraction(tally),
        mean_rank=mean_rank(tally),
        n_members=n_members,
        n_samples=len(records),
    )
    return report, tally


def evaluate_suite(generator: Generator, manifest: DatasetManifest, **kwargs) -> MetricReport:
    """evaluate_with_tally without the tally; see that function for semantics."""
    report, _ = evaluate_with_tally(generator, manifest, **kwargs)
    return report


def save_rank_tally(tally: RankTally, path: str | Path) -> None:
    doc = {"n_members": tally.n_members, "counts": tally.counts.tolist()}
    Path(path).write_text(json.dumps(doc), "utf-8")


def load_rank_tally(path: str | Path) -> RankTally:
    doc = json.loads(Path(path).read_text("utf-8"))
    return RankTally(n_members=doc["n_members"], counts=np.array(doc["counts"]))
