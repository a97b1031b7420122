"""Recurrent generator and discriminator networks.

Both networks are fully convolutional with weights shared across time steps,
so they accept any frame count and any spatial size that satisfies the
upsampling divisibility. The generator encodes the low-resolution input
together with per-time-step noise, evolves a ConvGRU state, and decodes it
through alternating residual blocks and 2x bilinear upsampling stages to a
sigmoid output. The discriminator scores (high-res, low-res) sequence pairs
with one unbounded scalar per time step; all of its linear maps are
spectrally normalized.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.parametrizations import spectral_norm

from .errors import DomainError, ShapeError, WeightFormatError


@dataclass(frozen=True)
class NetworkConfig:
    """Channel widths and structural knobs shared by generator and discriminator."""

    noise_channels: int = 8
    n_up: int = 4                      # upsampling stages; factor = 2**n_up
    enc_channels: int = 256            # encoder width and ConvGRU input
    gru_channels: int = 288            # generator ConvGRU hidden width
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32)
    disc_channels: tuple[int, ...] = (64, 128, 256, 256)
    disc_joint_channels: tuple[int, ...] = (256, 256)
    disc_gru_channels: int = 192
    disc_fc_width: int = 256
    kernel_size: int = 3
    leaky_slope: float = 0.2
    padding_mode: str = "reflect"      # or "circular" (cyclically shift-equivariant)
    l2_weight: float = 1e-4            # recommended generator weight penalty

    def __post_init__(self):
        if self.n_up < 1:
            raise DomainError("need at least one upsampling stage")
        if len(self.decoder_channels) != self.n_up:
            raise DomainError("decoder_channels must list one width per stage")
        if len(self.disc_channels) != self.n_up:
            raise DomainError("disc_channels must list one width per stage")
        if self.enc_channels <= self.noise_channels:
            raise DomainError("enc_channels must exceed noise_channels")
        widths = (
            self.noise_channels, self.enc_channels, self.gru_channels,
            *self.decoder_channels, *self.disc_channels,
            *self.disc_joint_channels, self.disc_gru_channels, self.disc_fc_width,
        )
        if any(w < 1 for w in widths):
            raise DomainError("every channel width must be at least 1")
        if self.padding_mode not in ("reflect", "circular", "zeros"):
            raise DomainError(f"unsupported padding mode {self.padding_mode!r}")

    @property
    def factor(self) -> int:
        return 2 ** self.n_up


def tiny_config(padding_mode: str = "reflect") -> NetworkConfig:
    """A ~100k-weight configuration for tests and desk-scale runs."""
    return NetworkConfig(
        noise_channels=4,
        enc_channels=24,
        gru_channels=24,
        decoder_channels=(24, 16, 12, 8),
        disc_channels=(12, 16, 24, 24),
        disc_joint_channels=(24, 24),
        disc_gru_channels=24,
        disc_fc_width=24,
        padding_mode=padding_mode,
    )


@dataclass
class NoiseBlock:
    """Per-time-step noise on the encoder's (low-resolution) grid."""

    values: np.ndarray                 # (n_t, channels, h, w), unit Gaussian draws
    amplitude: float = 1.0

    def __post_init__(self):
        if self.amplitude < 0:
            raise DomainError("noise amplitude must be nonnegative")
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise ShapeError("noise must be (n_t, channels, h, w)")

    @classmethod
    def draw(
        cls,
        rng: np.random.Generator,
        n_t: int,
        h: int,
        w: int,
        channels: int,
        amplitude: float = 1.0,
    ) -> "NoiseBlock":
        return cls(
            values=rng.standard_normal((n_t, channels, h, w)).astype(np.float32),
            amplitude=amplitude,
        )

    def tensor(self, device=None) -> torch.Tensor:
        """Amplitude-scaled noise with a leading batch axis of 1."""
        t = torch.from_numpy(self.values * np.float32(self.amplitude))
        return t.unsqueeze(0).to(device) if device is not None else t.unsqueeze(0)


def _conv(
    in_ch: int,
    out_ch: int,
    kernel: int,
    *,
    stride: int = 1,
    padding_mode: str = "reflect",
    spectral: bool = False,
) -> nn.Conv2d:
    conv = nn.Conv2d(
        in_ch,
        out_ch,
        kernel,
        stride=stride,
        padding=kernel // 2,
        padding_mode=padding_mode,
    )
    return spectral_norm(conv) if spectral else conv


class ResidualBlock(nn.Module):
    """Pre-activation residual block: x -> shortcut(x) + conv(act(conv(act(x)))).

    With all-zero convolution weights and matching channels it is an exact
    identity. A strided variant halves the spatial dims; mismatched channels
    are bridged by a 1x1 projection on the shortcut.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        *,
        stride: int = 1,
        leaky: bool = True,
        leaky_slope: float = 0.2,
        kernel: int = 3,
        padding_mode: str = "reflect",
        spectral: bool = False,
    ):
        super().__init__()
        self.act = nn.LeakyReLU(leaky_slope) if leaky else nn.ReLU()
        self.conv1 = _conv(
            in_ch, out_ch, kernel, stride=stride, padding_mode=padding_mode,
            spectral=spectral,
        )
        self.conv2 = _conv(
            out_ch, out_ch, kernel, padding_mode=padding_mode, spectral=spectral
        )
        if stride != 1 or in_ch != out_ch:
            shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride)
            self.shortcut = spectral_norm(shortcut) if spectral else shortcut
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.conv1.in_channels:
            raise ShapeError(
                f"block expects {self.conv1.in_channels} channels, got {x.shape[1]}"
            )
        y = self.conv2(self.act(self.conv1(self.act(x))))
        return self.shortcut(x) + y


class ConvGRU(nn.Module):
    """Gated recurrent unit whose affine maps are 2-D convolutions.

    z = sigmoid(conv_z([x, h]))        update gate
    r = sigmoid(conv_r([x, h]))        reset gate
    c = tanh(conv_c([x, r * h]))       candidate state
    h' = (1 - z) * h + z * c
    """

    def __init__(
        self,
        input_ch: int,
        hidden_ch: int,
        *,
        kernel: int = 3,
        padding_mode: str = "reflect",
        spectral: bool = False,
    ):
        super().__init__()
        self.input_ch = input_ch
        self.hidden_ch = hidden_ch
        joint = input_ch + hidden_ch
        self.conv_z = _conv(joint, hidden_ch, kernel, padding_mode=padding_mode, spectral=spectral)
        self.conv_r = _conv(joint, hidden_ch, kernel, padding_mode=padding_mode, spectral=spectral)
        self.conv_c = _conv(joint, hidden_ch, kernel, padding_mode=padding_mode, spectral=spectral)

    def forward(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != h.shape[-2:]:
            raise ShapeError(
                f"input grid {tuple(x.shape[-2:])} must match state grid {tuple(h.shape[-2:])}"
            )
        xh = torch.cat([x, h], dim=1)
        z = torch.sigmoid(self.conv_z(xh))
        r = torch.sigmoid(self.conv_r(xh))
        c = torch.tanh(self.conv_c(torch.cat([x, r * h], dim=1)))
        return (1.0 - z) * h + z * c


def upsample2x(x: torch.Tensor, padding_mode: str) -> torch.Tensor:
    """Bilinear 2x upsampling; in circular mode the borders wrap around."""
    if padding_mode == "circular":
        x = F.pad(x, (1, 1, 1, 1), mode="circular")
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return x[..., 2:-2, 2:-2]
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class _Encoder(nn.Module):
    """Input conv + noise concat + three residual blocks (plain ReLU)."""

    def __init__(self, n_v: int, config: NetworkConfig, out_ch: int):
        super().__init__()
        c = config.enc_channels
        self.conv_in = _conv(
            n_v, c - config.noise_channels, config.kernel_size,
            padding_mode=config.padding_mode,
        )
        common = dict(
            leaky=False, kernel=config.kernel_size, padding_mode=config.padding_mode
        )
        self.blocks = nn.ModuleList(
            [
                ResidualBlock(c, c, **common),
                ResidualBlock(c, c, **common),
                ResidualBlock(c, out_ch, **common),
            ]
        )

    def forward(self, frame: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        x = torch.cat([self.conv_in(frame), noise], dim=1)
        for block in self.blocks:
            x = block(x)
        return x


class Generator(nn.Module):
    """Recurrent conditional generator; output in (0, 1) via a final sigmoid."""

    def __init__(self, config: NetworkConfig, n_v: int = 1):
        super().__init__()
        self.config = config
        self.n_v = n_v
        self.update_encoder = _Encoder(n_v, config, config.enc_channels)
        self.init_encoder = _Encoder(n_v, config, config.gru_channels)
        self.gru = ConvGRU(
            config.enc_channels,
            config.gru_channels,
            kernel=config.kernel_size,
            padding_mode=config.padding_mode,
        )
        stages = []
        prev = config.gru_channels
        for width in config.decoder_channels:
            stages.append(
                ResidualBlock(
                    prev,
                    width,
                    leaky=True,
                    leaky_slope=config.leaky_slope,
                    kernel=config.kernel_size,
                    padding_mode=config.padding_mode,
                )
            )
            prev = width
        self.decoder_blocks = nn.ModuleList(stages)
        self.conv_out = _conv(prev, n_v, config.kernel_size, padding_mode=config.padding_mode)

    def initial_state(self, frame: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        """Derive the ConvGRU state for the first frame; bounded to tanh range."""
        return torch.tanh(self.init_encoder(frame, noise))

    def _decode(self, h: torch.Tensor) -> torch.Tensor:
        x = h
        for block in self.decoder_blocks:
            x = upsample2x(block(x), self.config.padding_mode)
        return torch.sigmoid(self.conv_out(x))

    def step(
        self, state: torch.Tensor, frame: torch.Tensor, noise: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Advance one time step; returns (high-res frame, new state)."""
        state = self.gru(self.update_encoder(frame, noise), state)
        return self._decode(state), state

    def forward(
        self,
        lr: torch.Tensor,
        noise: torch.Tensor,
        init_state: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Map (B, T, C, h, w) + (B, T, zc, h, w) to ((B, T, C, Kh, Kw), state)."""
        if lr.dim() != 5 or noise.dim() != 5:
            raise ShapeError("generator expects (batch, time, channels, h, w) tensors")
        if noise.shape[0] != lr.shape[0] or noise.shape[1] != lr.shape[1]:
            raise ShapeError("noise batch/time dims must match the input")
        if noise.shape[3:] != lr.shape[3:]:
            raise ShapeError("noise spatial grid must match the input")
        state = (
            self.initial_state(lr[:, 0], noise[:, 0])
            if init_state is None
            else init_state
        )
        outputs = []
        for t in range(lr.shape[1]):
            out, state = self.step(state, lr[:, t], noise[:, t])
            outputs.append(out)
        return torch.stack(outputs, dim=1), state


class _DiscBranch(nn.Module):
    """Two residual blocks, a zero-initialized ConvGRU, global average pooling."""

    def __init__(self, in_ch: int, config: NetworkConfig):
        super().__init__()
        widths = config.disc_joint_channels
        common = dict(
            leaky=True,
            leaky_slope=config.leaky_slope,
            kernel=config.kernel_size,
            padding_mode=config.padding_mode,
            spectral=True,
        )
        blocks = []
        prev = in_ch
        for width in widths:
            blocks.append(ResidualBlock(prev, width, **common))
            prev = width
        self.blocks = nn.ModuleList(blocks)
        self.gru = ConvGRU(
            prev,
            config.disc_gru_channels,
            kernel=config.kernel_size,
            padding_mode=config.padding_mode,
            spectral=True,
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, T, C, H, W) -> (B, T, gru_channels) pooled per time step."""
        b, t = x.shape[:2]
        flat = x.reshape(b * t, *x.shape[2:])
        for block in self.blocks:
            flat = block(flat)
        feats = flat.reshape(b, t, *flat.shape[1:])
        h = x.new_zeros(b, self.gru.hidden_ch, *feats.shape[-2:])
        pooled = []
        for k in range(t):
            h = self.gru(feats[:, k], h)
            pooled.append(h.mean(dim=(-2, -1)))
        return torch.stack(pooled, dim=1)


class Discriminator(nn.Module):
    """Scores a (high-res, low-res) sequence pair with one value per time step."""

    def __init__(self, config: NetworkConfig, n_v: int = 1):
        super().__init__()
        self.config = config
        self.n_v = n_v
        common = dict(
            leaky=True,
            leaky_slope=config.leaky_slope,
            kernel=config.kernel_size,
            padding_mode=config.padding_mode,
            spectral=True,
        )
        hr_blocks, lr_blocks = [], []
        prev = n_v
        for width in config.disc_channels:
            hr_blocks.append(ResidualBlock(prev, width, stride=2, **common))
            lr_blocks.append(ResidualBlock(prev, width, stride=1, **common))
            prev = width
        self.hr_encoder = nn.ModuleList(hr_blocks)
        self.lr_encoder = nn.ModuleList(lr_blocks)
        self.joint_branch = _DiscBranch(2 * prev, config)
        self.hr_branch = _DiscBranch(prev, config)
        self.fc_hidden = spectral_norm(
            nn.Linear(2 * config.disc_gru_channels, config.disc_fc_width)
        )
        self.fc_out = spectral_norm(nn.Linear(config.disc_fc_width, 1))
        self.act = nn.LeakyReLU(config.leaky_slope)

    def _encode(self, x: torch.Tensor, blocks: nn.ModuleList) -> torch.Tensor:
        b, t = x.shape[:2]
        flat = x.reshape(b * t, *x.shape[2:])
        for block in blocks:
            flat = block(flat)
        return flat.reshape(b, t, *flat.shape[1:])

    def forward(self, hr: torch.Tensor, lr: torch.Tensor) -> torch.Tensor:
        """(B, T, C, Kh, Kw) x (B, T, C, h, w) -> (B, T) unbounded scores."""
        if hr.dim() != 5 or lr.dim() != 5:
            raise ShapeError("discriminator expects (batch, time, channels, h, w)")
        factor = self.config.factor
        if hr.shape[-2:] != (lr.shape[-2] * factor, lr.shape[-1] * factor):
            raise ShapeError(
                f"high-res grid {tuple(hr.shape[-2:])} must be {factor}x the "
                f"low-res grid {tuple(lr.shape[-2:])}"
            )
        hr_feats = self._encode(hr, self.hr_encoder)
        lr_feats = self._encode(lr, self.lr_encoder)
        joint = self.joint_branch(torch.cat([hr_feats, lr_feats], dim=2))
        solo = self.hr_branch(hr_feats)
        x = torch.cat([joint, solo], dim=2)
        return self.fc_out(self.act(self.fc_hidden(x))).squeeze(-1)


def count_parameters(module: nn.Module) -> int:
    """Number of trainable scalar weights."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def zero_weights(module: nn.Module) -> None:
    """Set every parameter to zero in place (useful for identity checks)."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


def config_fingerprint(config: NetworkConfig, kind: str, n_v: int) -> str:
    doc = {"kind": kind, "n_v": n_v, "config": asdict(config)}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def save_weights(module: nn.Module, path, *, kind: str, n_v: int) -> None:
    """Write a named-array weight container with a config fingerprint."""
    config = module.config
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    arrays["__fingerprint__"] = np.array(config_fingerprint(config, kind, n_v))
    arrays["__config__"] = np.array(
        json.dumps({"kind": kind, "n_v": n_v, "config": asdict(config)})
    )
    np.savez(path, **arrays)


def load_weights(module: nn.Module, path, *, kind: str, n_v: int) -> None:
    """Load a weight container, rejecting fingerprint mismatches."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise WeightFormatError(f"cannot read weight container {path}: {exc}") from exc
    expected = config_fingerprint(module.config, kind, n_v)
    stored = str(data["__fingerprint__"]) if "__fingerprint__" in data else None
    if stored != expected:
        raise WeightFormatError(
            "weight container was written for a different network configuration"
        )
    state = {
        k: torch.from_numpy(np.array(data[k]))
        for k in data.files
        if not k.startswith("__")
    }
    module.load_state_dict(state, strict=True)


def reference_config() -> NetworkConfig:
    """Full-scale configuration; parameter counts land near the mid-teens of millions."""
    return NetworkConfig()
