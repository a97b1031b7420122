"""Command-line surface tying data synthesis, training, generation,
evaluation, method comparison, streaming, and plotting into reproducible
experiments.

Exit codes: 0 success, 2 usage errors, 3 data errors, 4 numerical failures.
The device is selected with the STOCHSR_DEVICE environment variable (default
cpu). A flat key=value config file can pre-set any long flag; explicit flags
win over the file, which wins over the preset.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import archive as archive_mod
from .archive import read_archive, split_dataset, synthesize_archive, write_archive
from .baselines import compare_methods
from .errors import ArchiveError, DomainError, ShapeError, StochSRError, TrainingError
from .evaluation import (
    evaluate_with_tally,
    generate_ensemble,
    load_rank_tally,
    sample_seed,
    save_rank_tally,
)
from .fields import FieldSequence, make_pair
from .nets import Generator, NetworkConfig, load_weights, reference_config, tiny_config
from .plotting import (
    plot_quality_history,
    plot_rank_cdf,
    plot_rank_histogram,
    plot_rank_history,
)
from .streaming import (
    DownscalingStream,
    read_frame_dir,
    save_event_log,
    segments_between_gaps,
)
from .synthetic import SyntheticParams
from .training import (
    Checkpoint,
    OptimizerPhase,
    TrainingConfig,
    append_log,
    read_log,
    train,
)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(StochSRError):
    pass


PRESETS = {
    "tiny": {
        "data": dict(n_sequences=48, n_t=2, h=32, w=32, test_fraction=0.25),
        "synthetic": dict(corr_length=4.0, occupancy=0.7),
        "training": TrainingConfig(
            batch_size=4,
            phases=(OptimizerPhase("adam", 1e-4, 56), OptimizerPhase("sgd", 1e-5, 64)),
            checkpoint_interval=16,
            smooth_sigma=0.75,
        ),
        "net": tiny_config,
        "snapshot": dict(n_members=4, max_samples=2),
        "ensemble_size": 8,
    },
    "desk": {
        "data": dict(n_sequences=2000, n_t=4, h=64, w=64, test_fraction=0.1),
        "synthetic": dict(corr_length=8.0, occupancy=0.7),
        "training": TrainingConfig(
            batch_size=16,
            phases=(
                OptimizerPhase("adam", 1e-4, 28_000),
                OptimizerPhase("sgd", 1e-5, 32_000),
            ),
            checkpoint_interval=3200,
            smooth_sigma=0.75,
        ),
        "net": tiny_config,
        "snapshot": dict(n_members=8, max_samples=4),
        "ensemble_size": 100,
    },
    "paper": {
        "data": dict(n_sequences=180_000, n_t=8, h=128, w=128, test_fraction=0.0),
        "synthetic": dict(corr_length=8.0, occupancy=0.7),
        "training": TrainingConfig(),   # 350k adam + 50k sgd sequences, batch 16
        "net": reference_config,
        "snapshot": dict(n_members=100, max_samples=16),
        "ensemble_size": 100,
    },
}


def device_from_env() -> str:
    device = os.environ.get("STOCHSR_DEVICE", "cpu")
    if device.startswith("cuda") and not torch.cuda.is_available():
        raise UsageError(f"device {device!r} requested but CUDA is unavailable")
    return device


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Flat key = value UTF-8 text; '#' starts a comment."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def apply_config_file(args: argparse.Namespace) -> None:
    if getattr(args, "config", None) is None:
        return
    overrides = parse_config_file(args.config)
    for key, raw in overrides.items():
        if not hasattr(args, key):
            raise UsageError(f"config file sets unknown key {key!r}")
        if getattr(args, key) is None:
            current_type = _FLAG_TYPES.get(key, str)
            try:
                setattr(args, key, current_type(raw))
            except ValueError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc


_FLAG_TYPES = {
    "seed": int,
    "ensemble_size": int,
    "noise_amplitude": float,
    "lambda_r": float,
    "max_samples": int,
    "sample_index": int,
    "n_sequences": int,
    "occupancy": float,
    "preset": str,
    "dataset": str,
    "checkpoint": str,
    "out": str,
    "split": str,
    "methods": str,
    "rcnn_checkpoint": str,
    "input_resolution": str,
}


def preset_of(args) -> dict:
    name = args.preset or "tiny"
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def require(args, flag: str):
    value = getattr(args, flag)
    if value is None:
        raise UsageError(f"--{flag.replace('_', '-')} is required for this command")
    return value


def _load_generator(path: str, device: str) -> Generator:
    """Accept either a training checkpoint directory or a weight container."""
    p = Path(path)
    if p.is_dir():
        return Checkpoint.load(p).build_generator(device)
    if not p.exists():
        raise ArchiveError(f"no checkpoint at {path}")
    for preset in ("tiny", "paper"):
        gen = Generator(PRESETS[preset]["net"]())
        try:
            load_weights(gen, p, kind="generator", n_v=1)
            return gen.to(device)
        except StochSRError:
            continue
    raise ArchiveError(
        f"weight container {path} matches no built-in configuration; "
        "pass a checkpoint directory instead"
    )


def _load_rcnn(path: str, device: str) -> Generator:
    p = Path(path)
    if not p.exists():
        raise ArchiveError(f"no regression weights at {path}")
    for preset in ("tiny", "paper"):
        gen = Generator(PRESETS[preset]["net"]())
        try:
            load_weights(gen, p, kind="rcnn", n_v=1)
            return gen.to(device)
        except StochSRError:
            continue
    raise ArchiveError(f"regression weights at {path} match no built-in configuration")


def cmd_synth_data(args) -> int:
    preset = preset_of(args)
    data = dict(preset["data"])
    if args.n_sequences is not None:
        data["n_sequences"] = args.n_sequences
    synth = dict(preset["synthetic"])
    if args.occupancy is not None:
        synth["occupancy"] = args.occupancy
    try:
        params = SyntheticParams(**synth)
    except DomainError as exc:
        raise UsageError(str(exc)) from exc
    out = require(args, "out")
    manifest = synthesize_archive(
        out,
        n_sequences=data["n_sequences"],
        n_t=data["n_t"],
        h=data["h"],
        w=data["w"],
        params=params,
        seed=args.seed or 0,
        test_fraction=data["test_fraction"],
    )
    print(f"wrote {len(manifest.records)} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    preset = preset_of(args)
    manifest = read_archive(require(args, "dataset"))
    if not manifest.split_records("valid"):
        split_dataset(manifest, 0.1, seed=args.seed or 0)
    config = preset["training"]
    if args.seed is not None:
        from dataclasses import replace

        config = replace(config, seed=args.seed)
    net_config: NetworkConfig = preset["net"]()
    out = Path(require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    log_path = out / "train_log.jsonl"
    history_path = out / "metric_history.jsonl"
    device = device_from_env()
    snapshot = preset["snapshot"]

    def on_losses(record):
        append_log(log_path, record)

    last = None
    for ckpt in train(
        config, manifest, net_config=net_config, device=device, on_losses=on_losses
    ):
        path = ckpt.save(ckpt_dir / f"step_{ckpt.g_sequences:08d}")
        generator = ckpt.build_generator(device)
        report, _ = evaluate_with_tally(
            generator,
            manifest,
            split="valid",
            n_members=snapshot["n_members"],
            max_samples=snapshot["max_samples"],
            seed=config.seed,
            smooth_sigma=config.smooth_sigma,
            device=device,
        )
        row = {"g_sequences": ckpt.g_sequences, **report.finite_fields()}
        append_log(history_path, row)
        print(f"checkpoint {path} ks={report.ks:.3f} crps={report.crps:.4f}")
        last = path
    print(f"final checkpoint: {last}")
    return 0


def cmd_gen(args) -> int:
    manifest = read_archive(require(args, "dataset"))
    device = device_from_env()
    generator = _load_generator(require(args, "checkpoint"), device)
    split = args.split or "test"
    records = manifest.split_records(split)
    if not records:
        raise ArchiveError(f"no sequences in split {split!r}")
    index = args.sample_index or 0
    if index >= len(records):
        raise UsageError(f"sample index {index} out of range ({len(records)} samples)")
    n_members = args.ensemble_size or preset_of(args)["ensemble_size"]
    pair = make_pair(manifest.load(records[index]), generator.config.factor)
    rng = sample_seed(args.seed or 0, index)
    block = generate_ensemble(
        generator,
        pair.lr,
        n_members,
        rng,
        noise_amplitude=args.noise_amplitude or 1.0,
        truth=pair.hr,
        device=device,
    )
    out = Path(require(args, "out"))
    members = [block.member_sequence(i) for i in range(block.n_members)]
    write_archive(members, out, splits=["test"] * len(members))
    meta = {
        "source_dataset": str(args.dataset),
        "split": split,
        "sample_index": index,
        "n_members": n_members,
        "seed": args.seed or 0,
        "noise_amplitude": args.noise_amplitude or 1.0,
    }
    (out / "ensemble.json").write_text(json.dumps(meta, indent=1), "utf-8")
    print(f"wrote {n_members} members to {out}")
    return 0


def cmd_eval(args) -> int:
    manifest = read_archive(require(args, "dataset"))
    device = device_from_env()
    generator = _load_generator(require(args, "checkpoint"), device)
    n_members = args.ensemble_size or preset_of(args)["ensemble_size"]
    report, tally = evaluate_with_tally(
        generator,
        manifest,
        split=args.split or "test",
        n_members=n_members,
        seed=args.seed or 0,
        noise_amplitude=args.noise_amplitude or 1.0,
        max_samples=args.max_samples,
        device=device,
    )
    out = Path(require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.txt")
    save_rank_tally(tally, out / "rank_tally.json")
    print(report.to_text(), end="")
    return 0


def cmd_compare(args) -> int:
    manifest = read_archive(require(args, "dataset"))
    device = device_from_env()
    methods = tuple((args.methods or "gan,lanczos,rainfarm").split(","))
    generator = None
    if "gan" in methods:
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required when comparing the gan method")
        generator = _load_generator(args.checkpoint, device)
    rcnn = None
    if "rcnn" in methods:
        if args.rcnn_checkpoint is None:
            raise UsageError("--rcnn-checkpoint is required for the rcnn method")
        rcnn = _load_rcnn(args.rcnn_checkpoint, device)
    try:
        reports = compare_methods(
            manifest,
            methods=methods,
            generator=generator,
            rcnn=rcnn,
            split=args.split or "test",
            n_members=args.ensemble_size or preset_of(args)["ensemble_size"],
            seed=args.seed or 0,
            max_samples=args.max_samples,
            device=device,
        )
    except DomainError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    columns = [
        "rmse", "ms_ssim", "lsd_db", "crps", "ks", "d_kl",
        "outlier_fraction", "mean_rank", "seconds_per_sequence",
    ]
    lines = ["method\t" + "\t".join(columns)]
    for method, report in reports.items():
        report.save(out / f"{method}_report.txt")
        cells = [
            "---" if getattr(report, c) is None else f"{getattr(report, c):.4g}"
            for c in columns
        ]
        lines.append(method + "\t" + "\t".join(cells))
    table = "\n".join(lines) + "\n"
    (out / "comparison.txt").write_text(table, "utf-8")
    print(table, end="")
    return 0


def cmd_stream(args) -> int:
    device = device_from_env()
    generator = _load_generator(require(args, "checkpoint"), device)
    source = Path(require(args, "dataset"))
    out = Path(require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    lambda_r = args.lambda_r or 0.0
    resolution = args.input_resolution or "high"
    if resolution not in ("high", "low"):
        raise UsageError("--input-resolution must be 'high' or 'low'")

    if (source / archive_mod.MANIFEST_NAME).exists():
        manifest = read_archive(source)
        records = sorted(manifest.records, key=lambda r: r.start_time)
        frames, stamps = [], []
        for record in records:
            seq = manifest.load(record)
            frames.extend(seq.values)
            stamps.extend(seq.timestamps)
        dt = manifest.dt_minutes
        pixel = manifest.pixel_size_km
        transform = manifest.transform
    else:
        loaded, dt, pixel, transform = read_frame_dir(source)
        frames = [f for f, _ in loaded]
        stamps = [t for _, t in loaded]
    if any(b <= a for a, b in zip(stamps, stamps[1:])):
        raise ArchiveError("input frames are not strictly increasing in time")

    stream = DownscalingStream(
        generator,
        dt_minutes=dt,
        transform=transform,
        lambda_r=lambda_r,
        noise_amplitude=args.noise_amplitude or 1.0,
        seed=args.seed or 0,
        device=device,
    )
    push = stream.push_highres if resolution == "high" else stream.push_lowres
    outputs = [push(frame, t) for frame, t in zip(frames, stamps)]

    out_pixel = pixel if resolution == "high" else pixel / stream.factor
    sequences = []
    for segment in segments_between_gaps(outputs):
        sequences.append(
            FieldSequence(
                values=np.stack([f.unit for f in segment]),
                timestamps=np.array([f.timestamp for f in segment]),
                pixel_size=out_pixel,
                transform=transform,
            )
        )
    write_archive(
        sequences, out / "frames", splits=["test"] * len(sequences), dt_minutes=dt
    )
    save_event_log(stream.events, out / "reinit_events.jsonl")
    diagnostics = [
        {"timestamp": f.timestamp, "saturated_fraction": f.saturated_fraction}
        for f in outputs
    ]
    (out / "diagnostics.jsonl").write_text(
        "".join(json.dumps(d) + "\n" for d in diagnostics), "utf-8"
    )
    print(
        f"streamed {len(outputs)} frames in {len(sequences)} segments, "
        f"{len(stream.events)} reinitializations"
    )
    return 0


def cmd_plot(args) -> int:
    out = Path(require(args, "out"))
    made = []
    if args.history is not None:
        history = read_log(args.history)
        made.append(plot_quality_history(history, out))
        made.append(plot_rank_history(history, out))
    if args.tally is not None:
        tally = load_rank_tally(args.tally)
        plot_rank_histogram(tally, out)
        made.append(out / "rank_histogram.png")
        made.append(plot_rank_cdf(tally, out))
    if not made:
        raise UsageError("nothing to plot: pass --history and/or --tally")
    for path in made:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochsr",
        description="Stochastic super-resolution of time-evolving 2-D fields",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", choices=sorted(PRESETS), default=None)
        p.add_argument("--dataset", default=None, help="dataset container directory")
        p.add_argument("--checkpoint", default=None, help="checkpoint directory or weight file")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--ensemble-size", dest="ensemble_size", type=int, default=None)
        p.add_argument(
            "--noise-amplitude", dest="noise_amplitude", type=float, default=None
        )
        p.add_argument("--lambda-r", dest="lambda_r", type=float, default=None)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset container")
    common(p)
    p.add_argument("--n-sequences", dest="n_sequences", type=int, default=None)
    p.add_argument("--occupancy", type=float, default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train the adversarial pair")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen", help="generate an ensemble for one sample")
    common(p)
    p.add_argument("--split", default=None)
    p.add_argument("--sample-index", dest="sample_index", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("eval", help="evaluate the metric suite on a split")
    common(p)
    p.add_argument("--split", default=None)
    p.add_argument("--max-samples", dest="max_samples", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="compare methods on identical inputs")
    common(p)
    p.add_argument("--split", default=None)
    p.add_argument("--max-samples", dest="max_samples", type=int, default=None)
    p.add_argument("--methods", default=None, help="comma list: gan,lanczos,rcnn,rainfarm")
    p.add_argument("--rcnn-checkpoint", dest="rcnn_checkpoint", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("stream", help="apply the generator to a long frame series")
    common(p)
    p.add_argument(
        "--input-resolution",
        dest="input_resolution",
        choices=("high", "low"),
        default=None,
        help="'high': frames are full-resolution and conditions are derived; "
        "'low': frames are already the coarse condition",
    )
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("plot", help="emit figures from histories and tallies")
    common(p)
    p.add_argument("--history", default=None, help="metric history jsonl")
    p.add_argument("--tally", default=None, help="rank tally json")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config_file(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArchiveError, DomainError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
