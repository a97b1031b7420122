"""Field sequences, high/low-resolution pairs, and geometric augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, ShapeError
from .transforms import (
    TransformSpec,
    downsample_coarse,
    gaussian_smooth,
    inverse_transform,
)


@dataclass
class FieldSequence:
    """A time series of 2-D fields in unit-interval representation.

    values: (n_t, h, w, n_v) float array in [0, 1]; exactly 0 means empty.
    timestamps: strictly increasing instants in minutes, nominally at constant
        spacing dt.
    pixel_size: physical edge length of one pixel in km.
    transform: the value transform that produced the unit representation.
    mask: optional (h, w) bool array of valid pixels.
    """

    values: np.ndarray
    timestamps: np.ndarray
    pixel_size: float
    transform: TransformSpec
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.values.ndim != 4:
            raise ShapeError(f"values must be (n_t, h, w, n_v), got {self.values.shape}")
        n_t, h, w, _ = self.values.shape
        if n_t < 1 or h < 1 or w < 1:
            raise ShapeError(f"degenerate field shape {self.values.shape}")
        if self.timestamps.shape != (n_t,):
            raise ShapeError("timestamps length must equal the number of frames")
        if n_t > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise DomainError("timestamps must be strictly increasing")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise DomainError("field values must lie in [0, 1]")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (h, w):
                raise ShapeError("mask shape must match the spatial dims")

    @property
    def n_t(self) -> int:
        return self.values.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @property
    def n_v(self) -> int:
        return self.values.shape[3]

    @property
    def dt(self) -> float:
        """Nominal frame spacing in minutes (single-frame sequences report 0)."""
        if self.n_t < 2:
            return 0.0
        return float(self.timestamps[1] - self.timestamps[0])

    def linear_values(self) -> np.ndarray:
        return inverse_transform(self.values, self.transform)


@dataclass
class SequencePair:
    """High-resolution target plus its derived low-resolution condition."""

    hr: FieldSequence
    lr: FieldSequence
    factor: int

    def __post_init__(self):
        if self.factor < 1:
            raise DomainError(f"factor must be a positive integer, got {self.factor}")
        hh, hw = self.hr.spatial_shape
        lh, lw = self.lr.spatial_shape
        if (hh, hw) != (self.factor * lh, self.factor * lw):
            raise ShapeError(
                f"hr dims {(hh, hw)} must be factor x lr dims {(lh, lw)}"
            )
        if self.hr.n_t != self.lr.n_t or self.hr.n_v != self.lr.n_v:
            raise ShapeError("hr and lr must share frame count and variable count")
        if not np.array_equal(self.hr.timestamps, self.lr.timestamps):
            raise DomainError("hr and lr timestamps must match")


def make_pair(
    hr: FieldSequence,
    factor: int,
    *,
    smooth_sigma: float = 0.0,
    smooth_lr: bool = False,
) -> SequencePair:
    """Derive the coarse condition from a high-res sequence by tile averaging.

    The low-res field is computed from the raw (unsmoothed) linear values;
    optional Gaussian smoothing is applied to the high-res side afterwards
    (and to the low-res side only when smooth_lr is set).
    """
    lr_values = downsample_coarse(hr.linear_values(), factor, hr.transform)
    hr_values = hr.values
    if smooth_sigma > 0:
        hr_values = gaussian_smooth(hr_values, smooth_sigma)
        if smooth_lr:
            lr_values = gaussian_smooth(lr_values, smooth_sigma)
    hr_out = replace(hr, values=np.clip(hr_values, 0.0, 1.0))
    lr_mask = None
    if hr.mask is not None:
        lr_mask = hr.mask.reshape(
            hr.mask.shape[0] // factor, factor, hr.mask.shape[1] // factor, factor
        ).any(axis=(1, 3))
    lr = FieldSequence(
        values=np.clip(lr_values, 0.0, 1.0).astype(np.float32),
        timestamps=hr.timestamps,
        pixel_size=hr.pixel_size * factor,
        transform=hr.transform,
        mask=lr_mask,
    )
    return SequencePair(hr=hr_out, lr=lr, factor=factor)


def _augment_array(values: np.ndarray, quarter_turns: int, mirror: bool) -> np.ndarray:
    # values laid out (..., h, w, n_v); rotate/mirror the two spatial axes
    axes = (values.ndim - 3, values.ndim - 2)
    out = values
    if mirror:
        out = np.flip(out, axis=axes[1])
    if quarter_turns:
        out = np.rot90(out, k=quarter_turns, axes=axes)
    return np.ascontiguousarray(out)


def augment(pair: SequencePair, quarter_turns: int, mirror: bool) -> SequencePair:
    """Rotate by multiples of 90 degrees and/or mirror both members of a pair.

    Quarter-turn rotations require square frames. (0, False) is the identity.
    """
    if quarter_turns not in (0, 1, 2, 3):
        raise DomainError(f"quarter_turns must be in 0..3, got {quarter_turns}")
    h, w = pair.hr.spatial_shape
    if quarter_turns % 2 == 1 and h != w:
        raise ShapeError(
            f"quarter-turn rotation needs square frames, got {h}x{w}"
        )
    if quarter_turns == 0 and not mirror:
        return pair

    def apply(seq: FieldSequence) -> FieldSequence:
        mask = seq.mask
        if mask is not None:
            mask = _augment_array(mask[..., None], quarter_turns, mirror)[..., 0]
        return replace(
            seq,
            values=_augment_array(seq.values, quarter_turns, mirror),
            mask=mask,
        )

    return SequencePair(hr=apply(pair.hr), lr=apply(pair.lr), factor=pair.factor)
