"""End-to-end desk-scale experiment: synthetic data, adversarial training,
ensemble evaluation, baseline comparison, and figures.

Usage:
    python scripts/run_desk_experiment.py OUT_DIR [--preset tiny|desk] [--seed N]

The desk preset trains for 32 000 generator sequences (about 2 000 steps at
batch 16) and takes a few hours on a laptop CPU; the tiny preset runs the same
pipeline in a couple of minutes. Outputs land under OUT_DIR: the dataset
container, checkpoints, training/metric logs, per-method reports, and the
figures.
"""

import argparse
import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from stochsr.archive import read_archive, split_dataset, synthesize_archive
from stochsr.baselines import compare_methods, train_rcnn
from stochsr.cli import PRESETS
from stochsr.evaluation import evaluate_with_tally, save_rank_tally
from stochsr.nets import save_weights
from stochsr.plotting import (
    plot_quality_history,
    plot_rank_cdf,
    plot_rank_histogram,
    plot_rank_history,
)
from stochsr.synthetic import SyntheticParams
from stochsr.training import append_log, read_log, train

# small networks run faster single-threaded: the convolutions are too small
# to amortize inter-thread synchronization
torch.set_num_threads(1)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=Path)
    parser.add_argument("--preset", choices=("tiny", "desk"), default="desk")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    preset = PRESETS[args.preset]
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    def note(msg):
        print(f"[{time.time() - started:7.0f}s] {msg}", flush=True)

    data_dir = out / "data"
    if not (data_dir / "manifest.json").exists():
        note(f"synthesizing {preset['data']['n_sequences']} sequences")
        synthesize_archive(
            data_dir,
            n_sequences=preset["data"]["n_sequences"],
            n_t=preset["data"]["n_t"],
            h=preset["data"]["h"],
            w=preset["data"]["w"],
            params=SyntheticParams(**preset["synthetic"]),
            seed=args.seed,
            test_fraction=preset["data"]["test_fraction"],
        )
    manifest = read_archive(data_dir)
    if not manifest.split_records("valid"):
        split_dataset(manifest, 0.1, seed=args.seed)
    note(
        f"dataset ready: {len(manifest.split_records('train'))} train / "
        f"{len(manifest.split_records('valid'))} valid / "
        f"{len(manifest.split_records('test'))} test"
    )

    config = preset["training"]
    net_config = preset["net"]()
    log_path = out / "train_log.jsonl"
    history_path = out / "metric_history.jsonl"
    snapshot = preset["snapshot"]

    last = None
    for ckpt in train(
        config,
        manifest,
        net_config=net_config,
        on_losses=lambda r: append_log(log_path, r),
    ):
        path = ckpt.save(out / "checkpoints" / f"step_{ckpt.g_sequences:08d}")
        generator = ckpt.build_generator()
        report, _ = evaluate_with_tally(
            generator,
            manifest,
            split="valid",
            n_members=snapshot["n_members"],
            max_samples=snapshot["max_samples"],
            seed=config.seed,
            smooth_sigma=config.smooth_sigma,
        )
        append_log(
            history_path, {"g_sequences": ckpt.g_sequences, **report.finite_fields()}
        )
        note(
            f"checkpoint {ckpt.g_sequences}: ks={report.ks:.3f} "
            f"crps={report.crps:.4f} lsd={report.lsd_db:.2f}"
        )
        last = ckpt

    generator = last.build_generator()
    note("training done; fitting the regression baseline")
    rcnn_config = config.scaled(4.0)
    rcnn = train_rcnn(rcnn_config, manifest, net_config=net_config)
    save_weights(rcnn, out / "rcnn_weights.npz", kind="rcnn", n_v=1)

    note("evaluating the trained generator on the held-out test split")
    report, tally = evaluate_with_tally(
        generator,
        manifest,
        split="test",
        n_members=preset["ensemble_size"],
        seed=args.seed + 1,
        smooth_sigma=config.smooth_sigma,
    )
    report.save(out / "gan_test_report.txt")
    save_rank_tally(tally, out / "rank_tally.json")
    print(report.to_text())

    note("comparing methods on the test split")
    reports = compare_methods(
        manifest,
        methods=("gan", "lanczos", "rcnn", "rainfarm"),
        generator=generator,
        rcnn=rcnn,
        split="test",
        n_members=preset["ensemble_size"],
        seed=args.seed + 1,
        max_samples=32,
        smooth_sigma=config.smooth_sigma,
    )
    columns = ("rmse", "ms_ssim", "lsd_db", "crps", "ks", "outlier_fraction",
               "seconds_per_sequence")
    print("method    " + "  ".join(f"{c:>10}" for c in columns))
    for method, r in reports.items():
        cells = [
            "       ---" if getattr(r, c) is None else f"{getattr(r, c):10.4f}"
            for c in columns
        ]
        print(f"{method:<9} " + "  ".join(cells))
        r.save(out / f"{method}_test_report.txt")

    note("drawing figures")
    history = read_log(history_path)
    plot_quality_history(history, out / "figures")
    plot_rank_history(history, out / "figures")
    plot_rank_histogram(tally, out / "figures")
    plot_rank_cdf(tally, out / "figures")
    note(f"done; outputs under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
