"""Reversible value transforms between linear physical fields and the unit interval.

Physical fields (rain rate, optical thickness, ...) are log-transformed and
mapped so that the detectable log range [x_min, x_max] lands on [theta, 1].
Empty pixels (value ``empty_value``, normally 0) map to exactly 0, leaving the
band (0, theta) as a guard zone that separates "empty" from the smallest
detectable value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage

from .errors import DomainError, ShapeError

DEFAULT_THETA = 0.17


@dataclass(frozen=True)
class TransformSpec:
    """Parameters of the linear <-> unit-interval mapping.

    theta: unit-interval threshold separating empty from detectable, in (0, 1).
    x_min, x_max: log-space bounds of the detectable range.
    log_base: base of the logarithm; None means natural log.
    empty_value: linear-space value representing an empty pixel.
    """

    theta: float = DEFAULT_THETA
    x_min: float = math.log(0.1)
    x_max: float = math.log(100.0)
    log_base: float | None = None
    empty_value: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise DomainError(f"theta must be in (0, 1), got {self.theta}")
        if not self.x_min < self.x_max:
            raise DomainError(f"need x_min < x_max, got [{self.x_min}, {self.x_max}]")
        if self.log_base is not None and self.log_base <= 1.0:
            raise DomainError(f"log_base must exceed 1, got {self.log_base}")

    @property
    def log_scale(self) -> float:
        """Natural-log divisor implementing the configured base."""
        return 1.0 if self.log_base is None else math.log(self.log_base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(**d)


def _affine_of_log(x: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Map log-space values affinely so x_min -> theta and x_max -> 1."""
    slope = (1.0 - spec.theta) / (spec.x_max - spec.x_min)
    return spec.theta + (x - spec.x_min) * slope


def forward_transform(field_linear: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Map linear physical values to the unit interval.

    Empty pixels go to exactly 0. Non-empty values are log-transformed and
    mapped affinely; values beyond the detectable range clamp to theta or 1.
    Negative input is rejected.
    """
    field_linear = np.asarray(field_linear)
    if np.any(field_linear < 0):
        raise DomainError("linear field contains negative values")
    values = field_linear.astype(np.float64, copy=False)
    empty = values == spec.empty_value
    out = np.zeros_like(values)
    if not np.all(empty):
        with np.errstate(divide="ignore"):
            x = np.log(np.where(empty, 1.0, values)) / spec.log_scale
        u = _affine_of_log(x, spec)
        out = np.where(empty, 0.0, np.clip(u, spec.theta, 1.0))
    if np.issubdtype(field_linear.dtype, np.floating):
        return out.astype(field_linear.dtype)
    return out


def inverse_transform(field_unit: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Map unit-interval values back to linear physical values.

    Everything below theta is considered empty and maps to ``empty_value``;
    values at or above theta invert the affine log mapping exactly.
    """
    field_unit = np.asarray(field_unit)
    if np.any(field_unit < 0) or np.any(field_unit > 1):
        raise DomainError("unit field contains values outside [0, 1]")
    values = field_unit.astype(np.float64, copy=False)
    slope = (spec.x_max - spec.x_min) / (1.0 - spec.theta)
    x = spec.x_min + (values - spec.theta) * slope
    linear = np.exp(x * spec.log_scale)
    out = np.where(values < spec.theta, spec.empty_value, linear)
    if np.issubdtype(field_unit.dtype, np.floating):
        return out.astype(field_unit.dtype)
    return out


def canonicalize(field_unit: np.ndarray, spec: TransformSpec) -> np.ndarray:
    """Truncate sub-threshold unit values to exactly 0.

    Network outputs live in the open interval (0, 1); mapping everything below
    theta to 0 puts them in the same representation as stored data, where 0 is
    the unique "empty" code. Evaluation compares fields in this form.
    """
    field_unit = np.asarray(field_unit)
    return np.where(field_unit < spec.theta, 0.0, field_unit).astype(
        field_unit.dtype, copy=False
    )


def downsample_coarse(hr_linear: np.ndarray, factor: int, spec: TransformSpec) -> np.ndarray:
    """Average linear values over non-overlapping factor x factor tiles, then transform.

    Tile means whose transformed value falls strictly between 0 and theta are
    truncated to 0 so the coarse field carries no sub-threshold information.
    Accepts (h, w) or (..., h, w, n_v) arrays; the two tiled axes are the last
    two spatial axes.
    """
    hr_linear = np.asarray(hr_linear, dtype=np.float64)
    if np.any(hr_linear < 0):
        raise DomainError("linear field contains negative values")
    if hr_linear.ndim == 2:
        spatial = (0, 1)
    elif hr_linear.ndim >= 3:
        spatial = (hr_linear.ndim - 3, hr_linear.ndim - 2)
    else:
        raise ShapeError("field must have at least 2 dimensions")
    h, w = hr_linear.shape[spatial[0]], hr_linear.shape[spatial[1]]
    if h % factor or w % factor:
        raise ShapeError(
            f"spatial dims ({h}, {w}) must be divisible by the factor {factor}"
        )
    shape = list(hr_linear.shape)
    shape[spatial[0] : spatial[1] + 1] = [h // factor, factor, w // factor, factor]
    tiles = hr_linear.reshape(shape)
    means = tiles.mean(axis=(spatial[0] + 1, spatial[0] + 3))

    empty = means == spec.empty_value
    with np.errstate(divide="ignore"):
        x = np.log(np.where(empty, 1.0, means)) / spec.log_scale
    u = np.minimum(_affine_of_log(x, spec), 1.0)
    u = np.where(empty, 0.0, u)
    return np.where(u < spec.theta, 0.0, u)


def gaussian_smooth(field_unit: np.ndarray, sigma: float) -> np.ndarray:
    """Per-frame 2-D Gaussian smoothing with reflect padding; sigma=0 is identity."""
    if sigma < 0:
        raise DomainError(f"sigma must be nonnegative, got {sigma}")
    field_unit = np.asarray(field_unit)
    if sigma == 0:
        return field_unit.copy()
    if field_unit.ndim == 2:
        axes = (0, 1)
    elif field_unit.ndim >= 3:
        axes = (field_unit.ndim - 3, field_unit.ndim - 2)
    else:
        raise ShapeError("field must have at least 2 dimensions")
    sigmas = [sigma if ax in axes else 0.0 for ax in range(field_unit.ndim)]
    return ndimage.gaussian_filter(field_unit, sigma=sigmas, mode="reflect")
