"""Classical comparison methods: Lanczos interpolation, an RMSE-trained
recurrent CNN sharing the generator architecture, and power-law spectral
downscaling with coarse-tile conservation. A comparison harness runs every
method through the same metric code paths and records per-sequence run time.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .archive import DatasetManifest, SampleStream
from .errors import DomainError, ShapeError
from .evaluation import (
    EnsembleBlock,
    MetricReport,
    RankTally,
    SampleScores,
    generate_ensemble,
    sample_seed,
    score_ensemble,
)
from .fields import make_pair
from .metrics import (
    kl_divergence,
    ks_statistic,
    mean_rank,
    outlier_fraction,
    radial_power_spectrum,
)
from .nets import Generator, NetworkConfig
from .training import TrainingConfig, _load_batch
from .transforms import forward_transform

LANCZOS_A = 3


def lanczos_kernel(distance: np.ndarray) -> np.ndarray:
    """Windowed sinc with support |d| < 3."""
    d = np.asarray(distance, dtype=np.float64)
    out = np.sinc(d) * np.sinc(d / LANCZOS_A)
    return np.where(np.abs(d) < LANCZOS_A, out, 0.0)


def _lanczos_matrix(n_in: int, factor: int) -> np.ndarray:
    """(factor * n_in, n_in) resampling matrix with edge-clamped taps."""
    n_out = factor * n_in
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / factor - 0.5
        lo = int(math.floor(center)) - LANCZOS_A + 1
        for j in range(lo, lo + 2 * LANCZOS_A):
            w = lanczos_kernel(center - j)
            weights[i, min(max(j, 0), n_in - 1)] += w
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def lanczos_upsample(lr_unit: np.ndarray, factor: int) -> np.ndarray:
    """Separable Lanczos-3 upsampling of (..., h, w, n_v) or (h, w) fields."""
    if factor < 1:
        raise DomainError("factor must be a positive integer")
    lr_unit = np.asarray(lr_unit, dtype=np.float64)
    if lr_unit.ndim == 2:
        frames = lr_unit[None, :, :, None]
        squeeze = True
    elif lr_unit.ndim == 4:
        frames = lr_unit
        squeeze = False
    else:
        raise ShapeError("expected (h, w) or (n_t, h, w, n_v)")
    n_t, h, w, n_v = frames.shape
    wy = _lanczos_matrix(h, factor)
    wx = _lanczos_matrix(w, factor)
    out = np.einsum("ab,tbcv,dc->tadv", wy, frames, wx)
    out = np.clip(out, 0.0, 1.0)
    return out[0, :, :, 0] if squeeze else out


@dataclass(frozen=True)
class RainFarmParams:
    """Spectral-scaling downscaler settings."""

    alpha: float | None = None        # fixed spectral slope; None -> estimate
    conservation: bool = True
    alpha_bounds: tuple[float, float] = (1.0, 4.0)
    seed: int = 0

    def __post_init__(self):
        if self.alpha is not None and not math.isfinite(self.alpha):
            raise DomainError("fixed spectral slope must be finite")


def estimate_spectral_slope(field: np.ndarray, bounds=(1.0, 4.0)) -> float:
    """Least-squares slope of log radial power against log wavenumber.

    Accepts (h, w) or (n_t, h, w); frames are averaged before fitting. The
    result is clamped into ``bounds`` because the downstream synthesis is
    sensitive to extreme exponents.
    """
    field = np.asarray(field, dtype=np.float64)
    frames = field[None] if field.ndim == 2 else field
    power = np.mean([radial_power_spectrum(f) for f in frames], axis=0)
    k = np.arange(1, len(power) + 1, dtype=np.float64)
    good = power > 0
    if good.sum() < 2:
        return bounds[0]
    slope = np.polyfit(np.log(k[good]), np.log(power[good]), 1)[0]
    return float(np.clip(-slope, bounds[0], bounds[1]))


def _power_law_field(
    rng: np.random.Generator, h: int, w: int, alpha: float
) -> np.ndarray:
    """Unit-variance Gaussian field with power spectrum proportional to |k|^-alpha."""
    ky = np.fft.fftfreq(h)[:, None] * h
    kx = np.fft.fftfreq(w)[None, :] * w
    k = np.hypot(ky, kx)
    amp = np.zeros_like(k)
    nonzero = k > 0
    amp[nonzero] = k[nonzero] ** (-alpha / 2.0)
    white = rng.standard_normal((h, w)) + 1j * rng.standard_normal((h, w))
    g = np.fft.ifft2(white * amp).real
    std = g.std()
    return g / std if std > 0 else g


def rainfarm(
    lr_linear: np.ndarray,
    factor: int,
    params: RainFarmParams,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Downscale a nonnegative coarse linear field by spectral synthesis.

    A Gaussian field with |k|^-alpha spectrum is exponentiated, then every
    coarse tile is rescaled so tile means reproduce the input exactly (when
    conservation is on). An all-zero input returns all zeros.
    """
    if factor < 1 or factor & (factor - 1):
        raise DomainError(f"factor must be a power of two, got {factor}")
    if rng is None:
        rng = np.random.default_rng(params.seed)
    lr_linear = np.asarray(lr_linear, dtype=np.float64)
    squeeze = lr_linear.ndim == 2
    frames = lr_linear[None] if squeeze else lr_linear
    if np.any(frames < 0):
        raise DomainError("coarse field must be nonnegative")
    n_t, h, w = frames.shape
    out = np.zeros((n_t, h * factor, w * factor))
    if np.any(frames > 0):
        alpha = (
            params.alpha
            if params.alpha is not None
            else estimate_spectral_slope(frames, params.alpha_bounds)
        )
        for t in range(n_t):
            g = _power_law_field(rng, h * factor, w * factor, alpha)
            r = np.exp(g)
            if params.conservation:
                tiles = r.reshape(h, factor, w, factor)
                tile_means = tiles.mean(axis=(1, 3))
                scale = np.where(tile_means > 0, frames[t] / tile_means, 0.0)
                r = (tiles * scale[:, None, :, None]).reshape(h * factor, w * factor)
            else:
                r = np.where(
                    np.repeat(np.repeat(frames[t], factor, 0), factor, 1) > 0, r, 0.0
                )
            out[t] = r
    return out[0] if squeeze else out


def train_rcnn(
    config: TrainingConfig,
    manifest: DatasetManifest,
    *,
    net_config: NetworkConfig,
    n_v: int = 1,
    loss: str = "rmse",
    device: str = "cpu",
    on_losses: Callable[[dict], None] | None = None,
) -> Generator:
    """Fit the generator architecture with its noise input disabled.

    Minimizes the root-mean-square (or, behind the flag, mean-absolute) error
    against the high-resolution target, making the model a deterministic
    single-output regressor with the same shape contract as the generator.
    """
    if loss not in ("rmse", "mae"):
        raise DomainError(f"loss must be 'rmse' or 'mae', got {loss!r}")
    records = manifest.split_records("train")
    if not records:
        raise DomainError("manifest has no training sequences")
    torch.manual_seed(config.seed)
    model = Generator(net_config, n_v).to(device)
    stream = SampleStream(len(records), config.seed)
    phase_index = 0
    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.phases[0].lr, betas=(0.9, 0.999)
    )
    seen = 0
    step = 0
    while seen < config.total_sequences:
        new_phase = config.phase_index(seen)
        if new_phase != phase_index:
            phase_index = new_phase
            phase = config.phases[phase_index]
            optimizer = (
                torch.optim.Adam(model.parameters(), lr=phase.lr, betas=(0.9, 0.999))
                if phase.optimizer == "adam"
                else torch.optim.SGD(model.parameters(), lr=phase.lr)
            )
        hr, lr = _load_batch(
            manifest, records, stream.next_batch(config.batch_size),
            net_config.factor, config, device,
        )
        zeros = torch.zeros(
            lr.shape[0], lr.shape[1], net_config.noise_channels, *lr.shape[-2:],
            device=lr.device,
        )
        optimizer.zero_grad(set_to_none=True)
        pred, _ = model(lr, zeros)
        err = (
            torch.sqrt(torch.mean((pred - hr) ** 2) + 1e-12)
            if loss == "rmse"
            else torch.mean(torch.abs(pred - hr))
        )
        err.backward()
        optimizer.step()
        step += 1
        seen += config.batch_size
        if on_losses is not None:
            on_losses({"step": step, "sequences": seen, "loss": err.item()})
    return model


def rcnn_predict(model: Generator, lr: torch.Tensor) -> torch.Tensor:
    """Deterministic forward pass with the noise input zeroed out."""
    zeros = torch.zeros(
        lr.shape[0], lr.shape[1], model.config.noise_channels, *lr.shape[-2:],
        device=lr.device,
    )
    with torch.no_grad():
        out, _ = model(lr, zeros)
    return out


DETERMINISTIC_METHODS = ("lanczos", "rcnn")
STOCHASTIC_METHODS = ("gan", "rainfarm")


def compare_methods(
    manifest: DatasetManifest,
    *,
    methods: tuple[str, ...] = ("gan", "lanczos", "rcnn", "rainfarm"),
    generator: Generator | None = None,
    rcnn: Generator | None = None,
    rainfarm_params: RainFarmParams | None = None,
    split: str = "test",
    n_members: int = 100,
    seed: int = 0,
    max_samples: int | None = None,
    smooth_sigma: float = 0.75,
    device: str = "cpu",
) -> dict[str, MetricReport]:
    """Run every requested method on identical inputs and score them alike.

    Deterministic methods produce a single member, so their ensemble metrics
    (CRPS, KS, KL divergence, outlier fraction, mean rank) are reported as
    absent. Wall time per sequence covers the generation call only.
    """
    for m in methods:
        if m not in DETERMINISTIC_METHODS + STOCHASTIC_METHODS:
            raise DomainError(f"unknown method {m!r}")
    if "gan" in methods and generator is None:
        raise DomainError("the gan method needs a generator")
    if "rcnn" in methods and rcnn is None:
        raise DomainError("the rcnn method needs a trained regression model")
    if rainfarm_params is None:
        rainfarm_params = RainFarmParams()
    records = manifest.split_records(split)
    if max_samples is not None:
        records = records[:max_samples]
    if not records:
        raise DomainError(f"no sequences in split {split!r}")
    factor = (
        generator.config.factor
        if generator is not None
        else (rcnn.config.factor if rcnn is not None else 16)
    )

    tallies = {m: RankTally(n_members) for m in methods}
    scores: dict[str, list[SampleScores]] = {m: [] for m in methods}
    seconds: dict[str, float] = {m: 0.0 for m in methods}

    for index, record in enumerate(records):
        pair = make_pair(manifest.load(record), factor, smooth_sigma=smooth_sigma)
        lr_values = pair.lr.values
        lr_linear = pair.lr.linear_values()[..., 0]
        spec = pair.hr.transform
        for method in methods:
            rng = sample_seed(seed, index)
            started = time.perf_counter()
            if method == "gan":
                block = generate_ensemble(
                    generator, pair.lr, n_members, rng, truth=pair.hr, device=device
                )
            elif method == "rainfarm":
                members = np.stack(
                    [
                        forward_transform(
                            rainfarm(lr_linear, factor, rainfarm_params, rng), spec
                        )[..., None]
                        for _ in range(n_members)
                    ]
                )
                block = EnsembleBlock(members=members, condition=pair.lr, truth=pair.hr)
            elif method == "lanczos":
                member = lanczos_upsample(lr_values, factor)
                block = EnsembleBlock(
                    members=member[None], condition=pair.lr, truth=pair.hr
                )
            else:  # rcnn
                lr_t = (
                    torch.from_numpy(lr_values).permute(0, 3, 1, 2).unsqueeze(0).to(device)
                )
                member = rcnn_predict(rcnn, lr_t)[0].permute(0, 2, 3, 1).cpu().numpy()
                block = EnsembleBlock(
                    members=member[None], condition=pair.lr, truth=pair.hr
                )
            seconds[method] += time.perf_counter() - started
            if method in DETERMINISTIC_METHODS:
                scores[method].append(score_ensemble(block, pair.hr))
            else:
                scores[method].append(
                    score_ensemble(block, pair.hr, tallies[method], rng)
                )

    reports: dict[str, MetricReport] = {}
    for method in methods:
        sample_list = scores[method]
        deterministic = method in DETERMINISTIC_METHODS
        reports[method] = MetricReport(
            rmse=float(np.mean([s.rmse for s in sample_list])),
            ms_ssim=float(np.mean([s.ms_ssim for s in sample_list])),
            lsd_db=float(np.mean([s.lsd_db for s in sample_list])),
            crps=None if deterministic else float(np.mean([s.crps for s in sample_list])),
            ks=None if deterministic else ks_statistic(tallies[method]),
            d_kl=None if deterministic else kl_divergence(tallies[method]),
            outlier_fraction=None if deterministic else outlier_fraction(tallies[method]),
            mean_rank=None if deterministic else mean_rank(tallies[method]),
            n_members=1 if deterministic else n_members,
            n_samples=len(records),
            seconds_per_sequence=seconds[method] / len(records),
        )
    return reports
