"""Image-quality and ensemble-verification metrics on unit-interval fields.

Single-image metrics: RMSE, multi-scale structural similarity, and the log
spectral distance between radially averaged power spectra. Ensemble metrics:
the closed-form continuous ranked probability score, normalized ranks with
randomized ties, and rank-distribution summaries (Kolmogorov-Smirnov distance
to uniform, Kullback-Leibler divergence, outlier fraction, mean rank).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError

# Multi-scale structural similarity constants from the standard definition.
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WINDOW = 11
MSSSIM_SIGMA = 1.5
MSSSIM_K1 = 0.01
MSSSIM_K2 = 0.03

POWER_FLOOR = 1e-12


def rmse(truth: np.ndarray, member: np.ndarray) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    member = np.asarray(member, dtype=np.float64)
    if truth.shape != member.shape:
        raise ShapeError("rmse operands must share a shape")
    return float(np.sqrt(np.mean((truth - member) ** 2)))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    xs = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * xs**2 / sigma**2)
    k /= k.sum()
    return np.outer(k, k)


def _ssim_components(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean luminance and contrast-structure terms over valid windows."""
    win = _gaussian_window(MSSSIM_WINDOW, MSSSIM_SIGMA)
    c1 = (MSSSIM_K1 * 1.0) ** 2
    c2 = (MSSSIM_K2 * 1.0) ** 2
    half = MSSSIM_WINDOW // 2

    def filt(x):
        return ndimage.correlate(x, win, mode="constant")[half:-half, half:-half]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(lum.mean()), float(cs.mean())


def max_msssim_scales(shape: tuple[int, int]) -> int:
    """Largest scale count whose coarsest image still fits the filter window."""
    scales = 0
    dim = min(shape)
    while dim >= MSSSIM_WINDOW and scales < len(MSSSIM_WEIGHTS):
        scales += 1
        dim //= 2
    return scales


def ms_ssim(truth: np.ndarray, member: np.ndarray, scales: int | None = None) -> float:
    """Multi-scale structural similarity of two 2-D images in [0, 1].

    When ``scales`` is omitted the count adapts to the image: the full five
    scales once min(h, w) >= 176, otherwise the largest feasible number. The
    standard per-scale weights are renormalized over the scales actually used.
    """
    truth = np.asarray(truth, dtype=np.float64)
    member = np.asarray(member, dtype=np.float64)
    if truth.shape != member.shape:
        raise ShapeError("ms_ssim operands must share a shape")
    if truth.ndim != 2:
        raise ShapeError("ms_ssim expects single 2-D frames")
    feasible = max_msssim_scales(truth.shape)
    if feasible < 1:
        raise DomainError(
            f"image {truth.shape} is smaller than the {MSSSIM_WINDOW}px filter window"
        )
    if scales is None:
        scales = feasible
    elif scales > feasible:
        raise DomainError(
            f"image {truth.shape} supports at most {feasible} scales; "
            f"use scales<={feasible}"
        )
    weights = np.array(MSSSIM_WEIGHTS[:scales])
    weights /= weights.sum()

    a, b = truth, member
    cs_terms = []
    lum_final = 1.0
    for level in range(scales):
        lum, cs = _ssim_components(a, b)
        cs_terms.append(max(cs, 0.0))
        if level == scales - 1:
            lum_final = max(lum, 0.0)
            break
        # 2x2 mean pooling between scales; odd trailing rows/cols are cropped
        h, w = a.shape[0] // 2 * 2, a.shape[1] // 2 * 2
        a = a[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        b = b[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    value = lum_final ** weights[-1]
    for weight, cs in zip(weights, cs_terms):
        value *= cs**weight
    return float(value)


def radial_power_spectrum(frame: np.ndarray, n_bins: int | None = None) -> np.ndarray:
    """Radially averaged periodogram of one 2-D frame.

    Wavenumbers are binned by their rounded integer radius in index units;
    bin i holds radius i+1, the constant (DC) component is excluded, and bins
    past min(h, w)/2 fall outside the reliable annulus and are dropped.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ShapeError("power spectrum expects a 2-D frame")
    h, w = frame.shape
    if n_bins is None:
        n_bins = min(h, w) // 2
    power = np.abs(np.fft.fft2(frame)) ** 2 / (h * w)
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    radius = np.hypot(ky[:, None], kx[None, :])
    idx = np.rint(radius).astype(int)
    sums = np.bincount(idx.ravel(), weights=power.ravel(), minlength=n_bins + 1)
    counts = np.bincount(idx.ravel(), minlength=n_bins + 1)
    with np.errstate(invalid="ignore"):
        means = sums / counts
    return means[1 : n_bins + 1]


def lsd(truth: np.ndarray, member: np.ndarray) -> float:
    """Log spectral distance in dB: RMS over bins of 10*log10(P_truth/P_member).

    Accepts single frames (h, w) or stacks (..., h, w); stacked spectra are
    averaged over the leading axes before the ratio. Empty bins are floored.
    """
    truth = np.asarray(truth, dtype=np.float64)
    member = np.asarray(member, dtype=np.float64)
    if truth.shape != member.shape:
        raise ShapeError("lsd operands must share a shape")
    frames_t = truth.reshape(-1, *truth.shape[-2:])
    frames_m = member.reshape(-1, *member.shape[-2:])
    p_truth = np.mean([radial_power_spectrum(f) for f in frames_t], axis=0)
    p_member = np.mean([radial_power_spectrum(f) for f in frames_m], axis=0)
    p_truth = np.maximum(p_truth, POWER_FLOOR)
    p_member = np.maximum(p_member, POWER_FLOOR)
    ratio_db = 10.0 * np.log10(p_truth / p_member)
    return float(np.sqrt(np.mean(ratio_db**2)))


def crps(ensemble: np.ndarray, observation: np.ndarray | float) -> float | np.ndarray:
    """Continuous ranked probability score, closed form.

    mean_j |x_j - o| - (1 / (2 m^2)) sum_jk |x_j - x_k|, which equals the
    integral of the squared difference between the ensemble step CDF and the
    observation's step CDF. With one member it reduces to |x - o|.
    ``ensemble`` has members on the first axis; trailing axes broadcast with
    ``observation`` and the score is returned per point.
    """
    ensemble = np.asarray(ensemble, dtype=np.float64)
    obs = np.asarray(observation, dtype=np.float64)
    m = ensemble.shape[0]
    term1 = np.mean(np.abs(ensemble - obs[None, ...]), axis=0)
    srt = np.sort(ensemble, axis=0)
    ranks = 2.0 * np.arange(1, m + 1, dtype=np.float64) - m - 1.0
    shape = (m,) + (1,) * (ensemble.ndim - 1)
    pair_sum = 2.0 * np.sum(srt * ranks.reshape(shape), axis=0)
    term2 = pair_sum / (2.0 * m * m)
    value = term1 - term2
    if value.ndim == 0:
        return float(value)
    return value


def crps_image(ensemble: np.ndarray, truth: np.ndarray) -> float:
    """Pixel-mean CRPS over a whole field (any trailing shape)."""
    return float(np.mean(crps(ensemble, truth)))


def normalized_rank(
    ensemble: np.ndarray, truth: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Position of the truth within the sorted ensemble, divided by m.

    r = (number of members strictly below the truth, plus a uniform draw over
    the tied span) / m, so exact ties randomize across every legal placement.
    """
    ensemble = np.asarray(ensemble)
    truth = np.asarray(truth)
    below = np.sum(ensemble < truth[None, ...], axis=0)
    ties = np.sum(ensemble == truth[None, ...], axis=0)
    offset = rng.integers(0, ties + 1)
    return (below + offset) / ensemble.shape[0]


@dataclass
class RankTally:
    """Histogram of normalized ranks over m+1 possible values {0, 1/m, ..., 1}."""

    n_members: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n_members < 1:
            raise DomainError("tally needs at least one ensemble member")
        if self.counts is None:
            self.counts = np.zeros(self.n_members + 1, dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.n_members + 1,):
                raise ShapeError("counts must have n_members + 1 bins")
            if np.any(self.counts < 0):
                raise DomainError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def n_bins(self) -> int:
        return self.n_members + 1

    def add_ranks(self, ranks: np.ndarray) -> None:
        idx = np.rint(np.asarray(ranks) * self.n_members).astype(int)
        if np.any(idx < 0) or np.any(idx > self.n_members):
            raise DomainError("ranks outside [0, 1]")
        self.counts += np.bincount(idx.ravel(), minlength=self.n_bins)

    def frequencies(self) -> np.ndarray:
        if self.total == 0:
            raise DomainError("empty tally")
        return self.counts / self.total

    def support(self) -> np.ndarray:
        return np.arange(self.n_bins) / self.n_members


def ks_statistic(tally: RankTally) -> float:
    """sup over the support of |empirical rank CDF - discrete-uniform CDF|."""
    ecdf = np.cumsum(tally.frequencies())
    uniform_cdf = np.arange(1, tally.n_bins + 1) / tally.n_bins
    return float(np.max(np.abs(ecdf - uniform_cdf)))


def kl_divergence(tally: RankTally) -> float:
    """Kullback-Leibler divergence of uniform P against the observed ranks Q.

    One pseudo-count per bin keeps empty bins finite; an exactly uniform tally
    still scores 0 because the smoothing preserves uniformity.
    """
    p = 1.0 / tally.n_bins
    q = (tally.counts + 1.0) / (tally.total + tally.n_bins)
    return float(np.sum(p * np.log(p / q)))


def outlier_fraction(tally: RankTally) -> float:
    """Share of truths falling outside the ensemble (rank 0 or 1)."""
    return float((tally.counts[0] + tally.counts[-1]) / tally.total)


def mean_rank(tally: RankTally) -> float:
    return float(np.sum(tally.support() * tally.frequencies()))
