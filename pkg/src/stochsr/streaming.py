"""Frame-by-frame application of a trained generator to long, gappy series.

The recurrent state is carried between consecutive frames and reinitialized
from the initialization encoder whenever the time gap exceeds the nominal
frame spacing. An optional relaxation nudges the state toward the state the
initialization encoder produces for an all-zeros input, trading a little
variability for long-run stability. Output is identical however the series is
chunked: the state can be exported at any non-gap boundary and restored.

Two input modes: full-resolution frames (center-cropped to dimensions
divisible by the upsampling factor, then tile-averaged into the condition) or
ready-made low-resolution frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DomainError, ShapeError
from .fields import FieldSequence
from .nets import Generator
from .transforms import (
    TransformSpec,
    canonicalize,
    downsample_coarse,
    inverse_transform,
)

SATURATION_LEVEL = 0.99


def prepare_frame(
    frame: np.ndarray, factor: int, mask: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None, tuple[int, int]]:
    """Center-crop spatial dims down to multiples of the upsampling factor.

    Masked (unavailable) pixels are set to empty before the frame is used as
    input. Returns (frame, mask, (row_offset, col_offset)).
    """
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim == 2:
        frame = frame[:, :, None]
    if frame.ndim != 3:
        raise ShapeError("frame must be (h, w) or (h, w, n_v)")
    h, w = frame.shape[:2]
    new_h, new_w = (h // factor) * factor, (w // factor) * factor
    if new_h == 0 or new_w == 0:
        raise ShapeError(
            f"frame {h}x{w} is smaller than the required multiple of {factor}"
        )
    top, left = (h - new_h) // 2, (w - new_w) // 2
    frame = frame[top : top + new_h, left : left + new_w]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise ShapeError("mask shape must match the frame")
        mask = mask[top : top + new_h, left : left + new_w]
        frame = np.where(mask[:, :, None], frame, 0.0).astype(np.float32)
    return frame, mask, (top, left)


def compute_h_null(
    generator: Generator, h: int, w: int, device: str = "cpu"
) -> torch.Tensor:
    """ConvGRU state the initialization encoder produces for an all-zeros input."""
    generator = generator.to(device).eval()
    frame = torch.zeros(1, generator.n_v, h, w, device=device)
    noise = torch.zeros(1, generator.config.noise_channels, h, w, device=device)
    with torch.no_grad():
        return generator.initial_state(frame, noise)


def stabilize(
    state: torch.Tensor, h_null: torch.Tensor, lambda_r: float
) -> torch.Tensor:
    """Relax the state toward the null state: h_null + (1 - lambda_r)(h - h_null)."""
    if not 0.0 <= lambda_r < 1.0:
        raise DomainError(f"relaxation constant must lie in [0, 1), got {lambda_r}")
    if lambda_r == 0.0:
        return state
    return h_null + (1.0 - lambda_r) * (state - h_null)


def frame_noise(
    seed: int, index: int, h: int, w: int, channels: int, amplitude: float = 1.0
) -> np.ndarray:
    """Reproducible per-frame noise draw, stateless in the frame counter."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    return (rng.standard_normal((channels, h, w)) * amplitude).astype(np.float32)


@dataclass
class StreamFrame:
    """One emitted high-resolution frame with its provenance."""

    timestamp: float
    unit: np.ndarray                  # canonical unit-interval values (Kh, Kw, n_v)
    linear: np.ndarray                # inverse-transformed physical values
    reinitialized: bool
    saturated_fraction: float         # share of raw output pixels >= 0.99
    crop_offset: tuple[int, int]


@dataclass
class StreamState:
    """Exportable recurrent state for chunked streaming."""

    hidden: np.ndarray | None
    last_timestamp: float | None
    frame_index: int


@dataclass
class ReinitEvent:
    timestamp: float
    frame_index: int
    reason: str


class DownscalingStream:
    """Applies the generator to frames one at a time, carrying recurrent state."""

    def __init__(
        self,
        generator: Generator,
        *,
        dt_minutes: float,
        transform: TransformSpec,
        lambda_r: float = 0.0,
        noise_amplitude: float = 1.0,
        seed: int = 0,
        device: str = "cpu",
    ):
        if dt_minutes <= 0:
            raise DomainError("frame spacing must be positive")
        if not 0.0 <= lambda_r < 1.0:
            raise DomainError(f"relaxation constant must lie in [0, 1), got {lambda_r}")
        self.generator = generator.to(device).eval()
        self.dt = dt_minutes
        self.transform = transform
        self.lambda_r = lambda_r
        self.noise_amplitude = noise_amplitude
        self.seed = seed
        self.device = device
        self._state: torch.Tensor | None = None
        self._last_t: float | None = None
        self._frame_index = 0
        self._h_null: torch.Tensor | None = None
        self._geometry: tuple[int, int] | None = None
        self.events: list[ReinitEvent] = []

    @property
    def factor(self) -> int:
        return self.generator.config.factor

    def export_state(self) -> StreamState:
        return StreamState(
            hidden=None if self._state is None else self._state.cpu().numpy(),
            last_timestamp=self._last_t,
            frame_index=self._frame_index,
        )

    def restore_state(self, state: StreamState) -> None:
        self._state = (
            None
            if state.hidden is None
            else torch.from_numpy(np.array(state.hidden)).to(self.device)
        )
        self._last_t = state.last_timestamp
        self._frame_index = state.frame_index

    def _null_state(self, h: int, w: int) -> torch.Tensor:
        if self._h_null is None or self._geometry != (h, w):
            self._h_null = compute_h_null(self.generator, h, w, self.device)
            self._geometry = (h, w)
        return self._h_null

    def push_lowres(
        self,
        frame: np.ndarray,
        timestamp: float,
        mask: np.ndarray | None = None,
        crop_offset: tuple[int, int] = (0, 0),
    ) -> StreamFrame:
        """Feed one low-resolution condition frame (h, w, n_v) on the coarse grid."""
        frame = np.asarray(frame, dtype=np.float32)
        if frame.ndim == 2:
            frame = frame[:, :, None]
        if self._last_t is not None and timestamp <= self._last_t:
            raise DomainError(
                f"timestamps must increase: got {timestamp} after {self._last_t}"
            )
        h, w = frame.shape[:2]
        noise = torch.from_numpy(
            frame_noise(
                self.seed, self._frame_index, h, w,
                self.generator.config.noise_channels, self.noise_amplitude,
            )
        ).unsqueeze(0).to(self.device)
        frame_t = (
            torch.from_numpy(frame).permute(2, 0, 1).unsqueeze(0).to(self.device)
        )

        reinitialized, reason = False, ""
        if self._state is None:
            reinitialized, reason = True, "start"
        elif self._state.shape[-2:] != (h, w):
            reinitialized, reason = True, "geometry change"
        elif timestamp - self._last_t > self.dt:
            reinitialized, reason = True, f"gap of {timestamp - self._last_t:g} min"

        with torch.no_grad():
            if reinitialized:
                self._state = self.generator.initial_state(frame_t, noise)
                self.events.append(ReinitEvent(timestamp, self._frame_index, reason))
            out, self._state = self.generator.step(self._state, frame_t, noise)
            if self.lambda_r > 0:
                self._state = stabilize(
                    self._state, self._null_state(h, w), self.lambda_r
                )
        raw = out[0].permute(1, 2, 0).cpu().numpy()
        saturated = float(np.mean(raw >= SATURATION_LEVEL))
        unit = canonicalize(raw, self.transform)
        if mask is not None:
            big_mask = np.kron(
                np.asarray(mask, dtype=bool),
                np.ones((self.factor, self.factor), dtype=bool),
            )
            unit = np.where(big_mask[:, :, None], unit, 0.0).astype(np.float32)
        linear = inverse_transform(unit, self.transform)
        self._last_t = timestamp
        self._frame_index += 1
        return StreamFrame(
            timestamp=timestamp,
            unit=unit,
            linear=linear,
            reinitialized=reinitialized,
            saturated_fraction=saturated,
            crop_offset=crop_offset,
        )

    def push_highres(
        self,
        frame: np.ndarray,
        timestamp: float,
        mask: np.ndarray | None = None,
    ) -> StreamFrame:
        """Feed one full-resolution frame; it is cropped to dimensions divisible
        by the factor and tile-averaged into the condition before generation."""
        frame, mask, offset = prepare_frame(frame, self.factor, mask)
        lr = downsample_coarse(
            inverse_transform(frame, self.transform), self.factor, self.transform
        ).astype(np.float32)
        lr_mask = None
        if mask is not None:
            lr_mask = mask.reshape(
                mask.shape[0] // self.factor, self.factor,
                mask.shape[1] // self.factor, self.factor,
            ).any(axis=(1, 3))
        return self.push_lowres(lr, timestamp, mask=lr_mask, crop_offset=offset)


def stream_sequence(
    generator: Generator,
    condition: FieldSequence,
    *,
    lambda_r: float = 0.0,
    noise_amplitude: float = 1.0,
    seed: int = 0,
    device: str = "cpu",
) -> tuple[list[StreamFrame], DownscalingStream]:
    """Stream every frame of a low-resolution condition sequence."""
    stream = DownscalingStream(
        generator,
        dt_minutes=condition.dt if condition.n_t > 1 else 1.0,
        transform=condition.transform,
        lambda_r=lambda_r,
        noise_amplitude=noise_amplitude,
        seed=seed,
        device=device,
    )
    frames = [
        stream.push_lowres(frame, t, mask=condition.mask)
        for frame, t in zip(condition.values, condition.timestamps)
    ]
    return frames, stream


def stream_highres_sequence(
    generator: Generator,
    sequence: FieldSequence,
    *,
    lambda_r: float = 0.0,
    noise_amplitude: float = 1.0,
    seed: int = 0,
    device: str = "cpu",
) -> tuple[list[StreamFrame], DownscalingStream]:
    """Stream a stored full-resolution sequence (condition derived per frame)."""
    stream = DownscalingStream(
        generator,
        dt_minutes=sequence.dt if sequence.n_t > 1 else 1.0,
        transform=sequence.transform,
        lambda_r=lambda_r,
        noise_amplitude=noise_amplitude,
        seed=seed,
        device=device,
    )
    frames = [
        stream.push_highres(frame, t, mask=sequence.mask)
        for frame, t in zip(sequence.values, sequence.timestamps)
    ]
    return frames, stream


FRAME_INDEX_NAME = "index.json"


def read_frame_dir(path: str | Path):
    """Load a directory of raw float32 frames listed by a timestamp index.

    The index is a JSON object with dt_minutes, pixel_size_km, a transform,
    the per-frame shape (h, w, n_v), and a ``frames`` list of file/timestamp
    entries ordered by time.
    """
    root = Path(path)
    index_path = root / FRAME_INDEX_NAME
    if not index_path.exists():
        raise DomainError(f"no {FRAME_INDEX_NAME} under {root}")
    doc = json.loads(index_path.read_text("utf-8"))
    shape = tuple(doc["shape"])
    transform = TransformSpec.from_dict(doc["transform"])
    frames = []
    for entry in doc["frames"]:
        data = np.fromfile(root / entry["file"], dtype="<f4")
        if data.size != int(np.prod(shape)):
            raise ShapeError(f"frame file {entry['file']} does not match shape {shape}")
        frames.append((data.reshape(shape), float(entry["timestamp"])))
    return frames, float(doc["dt_minutes"]), float(doc["pixel_size_km"]), transform


def write_frame_dir(
    path: str | Path,
    frames: list[np.ndarray],
    timestamps: list[float],
    *,
    dt_minutes: float,
    pixel_size_km: float,
    transform: TransformSpec,
) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (frame, t) in enumerate(zip(frames, timestamps)):
        name = f"frame_{i:06d}.dat"
        np.asarray(frame, dtype="<f4").tofile(root / name)
        entries.append({"file": name, "timestamp": t})
    doc = {
        "schema_version": 1,
        "dt_minutes": dt_minutes,
        "pixel_size_km": pixel_size_km,
        "transform": transform.to_dict(),
        "shape": list(np.asarray(frames[0]).shape),
        "frames": entries,
    }
    (root / FRAME_INDEX_NAME).write_text(json.dumps(doc, indent=1), "utf-8")


def segments_between_gaps(frames: list[StreamFrame]) -> list[list[StreamFrame]]:
    """Split a streamed series into contiguous runs at reinitialization points."""
    segments: list[list[StreamFrame]] = []
    for frame in frames:
        if frame.reinitialized or not segments:
            segments.append([])
        segments[-1].append(frame)
    return segments


def save_event_log(events: list[ReinitEvent], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(
                json.dumps(
                    {
                        "timestamp": e.timestamp,
                        "frame_index": e.frame_index,
                        "reason": e.reason,
                    }
                )
                + "\n"
            )
