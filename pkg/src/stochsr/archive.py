"""On-disk dataset container, manifest handling, splitting, and sample streams.

A dataset is a directory with a UTF-8 ``manifest.json`` plus one or more raw
shard files. Shards are little-endian IEEE-754 float32, row-major, shaped
(n_seq, n_t, h, w, n_v). The manifest records the frame spacing, pixel size,
value transform, per-shard shapes, per-sequence split labels, and start times,
so a write/read round trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    ArchiveError,
    DomainError,
    MalformedHeaderError,
    ShapeMismatchError,
    UnsupportedVersionError,
)
from .fields import FieldSequence
from .transforms import TransformSpec

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class SequenceRecord:
    """Location and metadata of one stored sequence."""

    file: str
    index: int                      # position within the shard
    shape: tuple[int, int, int, int]  # (n_t, h, w, n_v)
    split: str
    start_time: float

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * 4

    @property
    def offset(self) -> int:
        return self.index * self.nbytes


@dataclass
class DatasetManifest:
    """In-memory view of a dataset directory."""

    root: Path
    dt_minutes: float
    pixel_size_km: float
    transform: TransformSpec
    records: list[SequenceRecord] = field(default_factory=list)

    def split_records(self, split: str) -> list[SequenceRecord]:
        if split not in SPLITS:
            raise DomainError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == split]

    def load(self, record: SequenceRecord) -> FieldSequence:
        """Read one sequence; uses a read-only memmap so concurrent reads are safe."""
        path = self.root / record.file
        mm = np.memmap(path, dtype="<f4", mode="r")
        count = int(np.prod(record.shape))
        start = record.offset // 4
        values = np.array(mm[start : start + count]).reshape(record.shape)
        timestamps = record.start_time + self.dt_minutes * np.arange(
            record.shape[0], dtype=np.float64
        )
        return FieldSequence(
            values=values,
            timestamps=timestamps,
            pixel_size=self.pixel_size_km,
            transform=self.transform,
        )

    def iter_split(self, split: str) -> Iterator[FieldSequence]:
        for record in self.split_records(split):
            yield self.load(record)


def write_archive(
    sequences: Sequence[FieldSequence],
    path: str | Path,
    *,
    splits: Sequence[str] | None = None,
    shard_size: int = 1024,
    dt_minutes: float | None = None,
) -> DatasetManifest:
    """Write sequences to a dataset directory.

    Sequences sharing a shape are stacked into shards; a new shard starts when
    the shape changes or the shard is full, so mixed-length collections (for
    example streamed segments) are representable. The frame spacing defaults
    to the first multi-frame sequence's spacing.
    """
    sequences = list(sequences)
    if not sequences:
        raise DomainError("cannot write an empty archive")
    first = sequences[0]
    if dt_minutes is None:
        dt_minutes = next((s.dt for s in sequences if s.n_t > 1), 0.0)
    for seq in sequences:
        if seq.n_t > 1 and seq.dt != dt_minutes:
            raise ArchiveError("all sequences must share the frame spacing")
        if seq.transform != first.transform:
            raise ArchiveError("all sequences must share the value transform")
    if splits is None:
        splits = ["train"] * len(sequences)
    if len(splits) != len(sequences):
        raise DomainError("splits must have one label per sequence")
    for s in splits:
        if s not in SPLITS:
            raise DomainError(f"unknown split label {s!r}")

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    shard_entries = []
    records: list[SequenceRecord] = []

    chunks: list[list[int]] = []
    for i, seq in enumerate(sequences):
        if (
            chunks
            and len(chunks[-1]) < shard_size
            and sequences[chunks[-1][0]].values.shape == seq.values.shape
        ):
            chunks[-1].append(i)
        else:
            chunks.append([i])

    for shard_no, chunk in enumerate(chunks):
        fname = f"shard_{shard_no:04d}.dat"
        stacked = np.stack([sequences[i].values for i in chunk]).astype("<f4")
        stacked.tofile(root / fname)
        shape = sequences[chunk[0]].values.shape
        shard_entries.append(
            {
                "file": fname,
                "shape": [len(chunk), *shape],
                "dt_minutes": dt_minutes,
                "splits": [splits[i] for i in chunk],
                "start_times": [float(sequences[i].timestamps[0]) for i in chunk],
            }
        )
        for pos, i in enumerate(chunk):
            records.append(
                SequenceRecord(
                    file=fname,
                    index=pos,
                    shape=tuple(shape),
                    split=splits[i],
                    start_time=float(sequences[i].timestamps[0]),
                )
            )
    manifest_doc = {
        "schema_version": SCHEMA_VERSION,
        "dt_minutes": dt_minutes,
        "pixel_size_km": first.pixel_size,
        "transform": first.transform.to_dict(),
        "shards": shard_entries,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest_doc, indent=1), "utf-8")
    return DatasetManifest(
        root=root,
        dt_minutes=dt_minutes,
        pixel_size_km=first.pixel_size,
        transform=first.transform,
        records=records,
    )


def read_archive(path: str | Path) -> DatasetManifest:
    """Open a dataset directory, validating manifest and shard consistency."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise MalformedHeaderError(f"no {MANIFEST_NAME} under {root}")
    try:
        doc = json.loads(manifest_path.read_text("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"unparseable manifest: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedHeaderError("manifest must be a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise UnsupportedVersionError(
            f"schema version {version!r} not supported (expected {SCHEMA_VERSION})"
        )
    try:
        dt = float(doc["dt_minutes"])
        pixel_size = float(doc["pixel_size_km"])
        transform = TransformSpec.from_dict(doc["transform"])
        shards = doc["shards"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"manifest missing or bad field: {exc}") from exc

    records: list[SequenceRecord] = []
    for entry in shards:
        try:
            fname = entry["file"]
            shape = tuple(int(s) for s in entry["shape"])
            shard_splits = entry["splits"]
            start_times = entry["start_times"]
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"bad shard entry: {exc}") from exc
        if len(shape) != 5:
            raise MalformedHeaderError(
                f"shard shape must have 5 entries, got {shape}"
            )
        shard_dt = entry.get("dt_minutes", dt)
        if shard_dt != dt:
            raise ArchiveError(
                f"shard {fname} frame spacing {shard_dt} disagrees with manifest {dt}"
            )
        n_seq = shape[0]
        if len(shard_splits) != n_seq or len(start_times) != n_seq:
            raise MalformedHeaderError(
                f"shard {fname}: splits/start_times must list {n_seq} entries"
            )
        shard_path = root / fname
        if not shard_path.exists():
            raise ShapeMismatchError(f"missing shard file {fname}")
        expected = int(np.prod(shape)) * 4
        actual = shard_path.stat().st_size
        if actual != expected:
            raise ShapeMismatchError(
                f"shard {fname} holds {actual} bytes but shape {shape} needs {expected}"
            )
        for i in range(n_seq):
            if shard_splits[i] not in SPLITS:
                raise MalformedHeaderError(
                    f"shard {fname}: unknown split label {shard_splits[i]!r}"
                )
            records.append(
                SequenceRecord(
                    file=fname,
                    index=i,
                    shape=tuple(shape[1:]),
                    split=shard_splits[i],
                    start_time=float(start_times[i]),
                )
            )
    return DatasetManifest(
        root=root,
        dt_minutes=dt,
        pixel_size_km=pixel_size,
        transform=transform,
        records=records,
    )


def split_dataset(
    manifest: DatasetManifest, valid_fraction: float = 0.1, seed: int = 0
) -> DatasetManifest:
    """Reassign train/valid labels over the train+valid pool, deterministically.

    Test records are untouched. The updated labels are written back to the
    manifest file so later readers see the same split.
    """
    pool = [i for i, r in enumerate(manifest.records) if r.split in ("train", "valid")]
    if len(manifest.records) == 0:
        raise DomainError("empty manifest")
    if len(pool) < 10:
        raise DomainError(f"need at least 10 splittable sequences, got {len(pool)}")
    n_valid = int(round(valid_fraction * len(pool)))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(len(pool))[:n_valid]
    valid_set = {pool[i] for i in chosen}
    new_records = []
    for i, rec in enumerate(manifest.records):
        if rec.split == "test":
            new_records.append(rec)
        else:
            split = "valid" if i in valid_set else "train"
            new_records.append(
                SequenceRecord(rec.file, rec.index, rec.shape, split, rec.start_time)
            )
    manifest.records = new_records
    _rewrite_manifest_splits(manifest)
    return manifest


def _rewrite_manifest_splits(manifest: DatasetManifest) -> None:
    path = manifest.root / MANIFEST_NAME
    doc = json.loads(path.read_text("utf-8"))
    by_file: dict[str, list[SequenceRecord]] = {}
    for rec in manifest.records:
        by_file.setdefault(rec.file, []).append(rec)
    for entry in doc["shards"]:
        recs = sorted(by_file[entry["file"]], key=lambda r: r.index)
        entry["splits"] = [r.split for r in recs]
    path.write_text(json.dumps(doc, indent=1), "utf-8")


def stream_seed(seed: int, epoch: int, position: int) -> int:
    """Stateless per-sample seed; identical regardless of which worker draws it."""
    ss = np.random.SeedSequence([seed, epoch, position])
    return int(ss.generate_state(2, dtype=np.uint64)[0])


class SampleStream:
    """Deterministic epoch-reshuffled stream of (record_index, sample_seed) pairs.

    The permutation of each epoch and the per-sample seeds depend only on
    (seed, epoch, position), so prefetching by parallel workers cannot change
    the sequence of samples. State is just (epoch, cursor), which makes the
    stream checkpointable.
    """

    def __init__(self, n_items: int, seed: int, *, epoch: int = 0, cursor: int = 0):
        if n_items < 1:
            raise DomainError("stream needs at least one item")
        self.n_items = n_items
        self.seed = seed
        self.epoch = epoch
        self.cursor = cursor
        self._perm = self._permutation(epoch)

    def _permutation(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
        return rng.permutation(self.n_items)

    def next_batch(self, k: int) -> list[tuple[int, int]]:
        out = []
        for _ in range(k):
            if self.cursor >= self.n_items:
                self.epoch += 1
                self.cursor = 0
                self._perm = self._permutation(self.epoch)
            position = self.epoch * self.n_items + self.cursor
            out.append(
                (int(self._perm[self.cursor]), stream_seed(self.seed, self.epoch, position))
            )
            self.cursor += 1
        return out

    @property
    def state(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}

    @classmethod
    def from_state(cls, n_items: int, seed: int, state: dict) -> "SampleStream":
        return cls(n_items, seed, epoch=state["epoch"], cursor=state["cursor"])


def synthesize_archive(
    path: str | Path,
    *,
    n_sequences: int,
    n_t: int,
    h: int,
    w: int,
    params,
    seed: int,
    test_fraction: float = 0.0,
    transform: TransformSpec | None = None,
) -> DatasetManifest:
    """Generate a synthetic dataset directly into a container directory."""
    from .synthetic import synth_sequence

    sequences = []
    splits = []
    n_test = int(round(test_fraction * n_sequences))
    for i in range(n_sequences):
        p = replace(params, seed=stream_seed(seed, 0, i))
        sequences.append(
            synth_sequence(p, n_t, h, w, transform=transform, start_time=i * n_t * p.dt_minutes)
        )
        splits.append("test" if i >= n_sequences - n_test else "train")
    return write_archive(sequences, path, splits=splits)
