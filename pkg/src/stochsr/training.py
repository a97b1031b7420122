"""Adversarial training: losses, gradient penalty, schedule, checkpointing.

The discriminator is trained to push its scores down on real pairs and up on
generated ones, subject to a gradient penalty that pulls the gradient norm
along real/generated mixtures toward 1. Five discriminator batches alternate
with one generator batch. Adam runs for most of the schedule, then a final
stochastic-gradient phase takes over. All randomness flows through a single
numpy generator whose state is checkpointed, so training is resumable with a
bit-consistent loss trace.
"""

from __future__ import annotations

import json
import os
import shutil
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .archive import DatasetManifest, SampleStream
from .errors import DomainError, TrainingError, WeightFormatError
from .fields import augment, make_pair
from .nets import Discriminator, Generator, NetworkConfig, load_weights, save_weights

CHECKPOINT_STATE_NAME = "state.json"


@dataclass(frozen=True)
class OptimizerPhase:
    optimizer: str          # "adam" or "sgd"
    lr: float
    until_sequences: int    # phase is active while g_sequences < this bound

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class TrainingConfig:
    gamma: float = 10.0
    d_steps_per_g: int = 5
    batch_size: int = 16
    phases: tuple[OptimizerPhase, ...] = (
        OptimizerPhase("adam", 1e-4, 350_000),
        OptimizerPhase("sgd", 1e-5, 400_000),
    )
    checkpoint_interval: int = 3200
    l2_weight: float = 1e-4
    adam_betas: tuple[float, float] = (0.0, 0.9)
    smooth_sigma: float = 0.75
    smooth_lr: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise DomainError("gradient penalty weight must be nonnegative")
        if self.batch_size < 1:
            raise DomainError("batch size must be positive")
        if self.d_steps_per_g < 1:
            raise DomainError("need at least one discriminator step per cycle")
        bounds = [p.until_sequences for p in self.phases]
        if not bounds or any(b <= a for a, b in zip(bounds, bounds[1:])):
            raise DomainError("phase boundaries must be strictly increasing")

    @property
    def total_sequences(self) -> int:
        return self.phases[-1].until_sequences

    def scaled(self, divisor: float) -> "TrainingConfig":
        """Shrink every sequence-count threshold by one common divisor."""
        phases = tuple(
            replace(p, until_sequences=max(1, int(p.until_sequences / divisor)))
            for p in self.phases
        )
        return replace(
            self,
            phases=phases,
            checkpoint_interval=max(1, int(self.checkpoint_interval / divisor)),
        )

    def phase_index(self, g_sequences: int) -> int:
        for i, phase in enumerate(self.phases):
            if g_sequences < phase.until_sequences:
                return i
        return len(self.phases) - 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        d["phases"] = tuple(OptimizerPhase(**p) for p in d["phases"])
        d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass
class LossReport:
    """Loss terms of one training cycle; loss_d = score_real - score_gen + penalty.

    A generator-only step reports loss_g and the generated score; the
    discriminator fields stay None.
    """

    loss_d: float | None
    penalty: float | None
    score_real: float | None
    score_gen: float
    loss_g: float | None = None
    phase: str = "adam"

    def as_record(self, step: int, g_sequences: int, wall_time: float) -> dict:
        return {
            "step": step,
            "g_sequences": g_sequences,
            "loss_d": self.loss_d,
            "loss_g": self.loss_g,
            "penalty": self.penalty,
            "score_real": self.score_real,
            "score_gen": self.score_gen,
            "phase": self.phase,
            "wall_time": wall_time,
        }


def gradient_penalty(
    score_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    x_gen: torch.Tensor,
    epsilon: torch.Tensor,
    gamma: float,
    *,
    step: int | None = None,
) -> torch.Tensor:
    """gamma * mean over the batch of (|grad of score wrt the mixture| - 1)^2.

    One epsilon per sample mixes real and generated; the gradient norm is the
    full-sample L2 over every element of the sequence, time included.
    """
    shape = (x.shape[0],) + (1,) * (x.dim() - 1)
    eps = epsilon.reshape(shape).to(x.dtype)
    x_hat = (eps * x + (1.0 - eps) * x_gen).detach().requires_grad_(True)
    scores = score_fn(x_hat)
    (grads,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    if not torch.isfinite(grads).all():
        raise TrainingError("non-finite gradient in penalty term", step=step)
    norms = grads.reshape(grads.shape[0], -1).norm(dim=1)
    return gamma * ((norms - 1.0) ** 2).mean()


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def _draw_noise(
    rng: np.random.Generator, lr: torch.Tensor, channels: int
) -> torch.Tensor:
    b, t, _, h, w = lr.shape
    z = rng.standard_normal((b, t, channels, h, w)).astype(np.float32)
    return torch.from_numpy(z).to(lr.device)


def _check_finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{what} became non-finite", step=step)


def discriminator_step(
    generator: Generator,
    discriminator: Discriminator,
    optimizer: torch.optim.Optimizer,
    batch: tuple[torch.Tensor, torch.Tensor],
    rng: np.random.Generator,
    config: TrainingConfig,
    *,
    step: int = 0,
) -> LossReport:
    """One optimizer update on the discriminator; generator weights frozen."""
    hr, lr = batch
    _set_requires_grad(discriminator, True)
    noise = _draw_noise(rng, lr, generator.config.noise_channels)
    epsilon = torch.from_numpy(
        rng.uniform(0.0, 1.0, size=hr.shape[0]).astype(np.float32)
    )
    with torch.no_grad():
        fake, _ = generator(lr, noise)

    def score(x_hat: torch.Tensor) -> torch.Tensor:
        return discriminator(x_hat, lr).mean(dim=1)

    optimizer.zero_grad(set_to_none=True)
    # one forward for both halves so the power-iteration state cannot drift
    # between the real and generated scores
    both = discriminator(
        torch.cat([hr, fake], dim=0), torch.cat([lr, lr], dim=0)
    ).mean(dim=1)
    score_real = both[: hr.shape[0]].mean()
    score_gen = both[hr.shape[0] :].mean()
    penalty = (
        gradient_penalty(score, hr, fake, epsilon, config.gamma, step=step)
        if config.gamma > 0
        else hr.new_zeros(())
    )
    loss = score_real - score_gen + penalty
    _check_finite(loss.item(), "discriminator loss", step)
    loss.backward()
    optimizer.step()
    return LossReport(
        loss_d=loss.item(),
        penalty=penalty.item(),
        score_real=score_real.item(),
        score_gen=score_gen.item(),
    )


def generator_step(
    generator: Generator,
    discriminator: Discriminator,
    optimizer: torch.optim.Optimizer,
    batch: tuple[torch.Tensor, torch.Tensor],
    rng: np.random.Generator,
    config: TrainingConfig,
    *,
    step: int = 0,
) -> LossReport:
    """One optimizer update on the generator; discriminator weights frozen."""
    _, lr = batch
    _set_requires_grad(discriminator, False)
    noise = _draw_noise(rng, lr, generator.config.noise_channels)
    optimizer.zero_grad(set_to_none=True)
    fake, _ = generator(lr, noise)
    adv = discriminator(fake, lr).mean(dim=1).mean()
    reg = fake.new_zeros(())
    if config.l2_weight > 0:
        for p in generator.parameters():
            if p.dim() == 4:  # convolution kernels only, biases exempt
                reg = reg + p.pow(2).sum()
    loss = adv + config.l2_weight * reg
    _check_finite(loss.item(), "generator loss", step)
    loss.backward()
    optimizer.step()
    _set_requires_grad(discriminator, True)
    return LossReport(
        loss_d=None,
        penalty=None,
        score_real=None,
        score_gen=adv.item(),
        loss_g=loss.item(),
    )


def _build_optimizer(
    module: torch.nn.Module, phase: OptimizerPhase, betas: tuple[float, float]
) -> torch.optim.Optimizer:
    if phase.optimizer == "adam":
        return torch.optim.Adam(module.parameters(), lr=phase.lr, betas=betas)
    return torch.optim.SGD(module.parameters(), lr=phase.lr)


def _optimizer_arrays(
    optimizer: torch.optim.Optimizer, module: torch.nn.Module
) -> dict[str, np.ndarray]:
    by_param = {id(p): name for name, p in module.named_parameters()}
    out: dict[str, np.ndarray] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = by_param[id(p)]
            for key, value in state.items():
                arr = (
                    value.detach().cpu().numpy()
                    if torch.is_tensor(value)
                    else np.asarray(value)
                )
                out[f"{name}.{key}"] = arr
    return out


def _load_optimizer_arrays(
    optimizer: torch.optim.Optimizer,
    module: torch.nn.Module,
    arrays: dict[str, np.ndarray],
) -> None:
    by_name = dict(module.named_parameters())
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        name, state_key = key.rsplit(".", 1)
        grouped.setdefault(name, {})[state_key] = arr
    for name, entries in grouped.items():
        p = by_name[name]
        optimizer.state[p] = {
            k: torch.from_numpy(np.array(v)) for k, v in entries.items()
        }


@dataclass
class Checkpoint:
    """Everything needed to resume training and reproduce the next step."""

    g_sequences: int
    step: int
    training_config: TrainingConfig
    net_config: NetworkConfig
    n_v: int
    generator_state: dict
    discriminator_state: dict
    opt_g_arrays: dict[str, np.ndarray]
    opt_d_arrays: dict[str, np.ndarray]
    rng_state: dict
    stream_state: dict

    def save(self, path: str | Path) -> Path:
        """Write atomically: stage into a temp directory, then rename."""
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        gen = Generator(self.net_config, self.n_v)
        gen.load_state_dict(self.generator_state)
        save_weights(gen, tmp / "generator.npz", kind="generator", n_v=self.n_v)
        disc = Discriminator(self.net_config, self.n_v)
        disc.load_state_dict(self.discriminator_state)
        save_weights(disc, tmp / "discriminator.npz", kind="discriminator", n_v=self.n_v)
        np.savez(tmp / "optim_g.npz", **self.opt_g_arrays)
        np.savez(tmp / "optim_d.npz", **self.opt_d_arrays)
        state = {
            "schema_version": 1,
            "g_sequences": self.g_sequences,
            "step": self.step,
            "n_v": self.n_v,
            "training_config": self.training_config.to_dict(),
            "net_config": asdict(self.net_config),
            "rng_state": self.rng_state,
            "stream_state": self.stream_state,
        }
        (tmp / CHECKPOINT_STATE_NAME).write_text(json.dumps(state, indent=1), "utf-8")
        if path.exists():
            shutil.rmtree(path)
        os.rename(tmp, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        state_file = path / CHECKPOINT_STATE_NAME
        if not state_file.exists():
            raise WeightFormatError(f"no checkpoint state under {path}")
        state = json.loads(state_file.read_text("utf-8"))
        if state.get("schema_version") != 1:
            raise WeightFormatError("unsupported checkpoint schema version")
        net_config = NetworkConfig(
            **{
                k: tuple(v) if isinstance(v, list) else v
                for k, v in state["net_config"].items()
            }
        )
        n_v = state["n_v"]
        gen = Generator(net_config, n_v)
        load_weights(gen, path / "generator.npz", kind="generator", n_v=n_v)
        disc = Discriminator(net_config, n_v)
        load_weights(disc, path / "discriminator.npz", kind="discriminator", n_v=n_v)
        with np.load(path / "optim_g.npz") as data:
            opt_g = {k: np.array(data[k]) for k in data.files}
        with np.load(path / "optim_d.npz") as data:
            opt_d = {k: np.array(data[k]) for k in data.files}
        return cls(
            g_sequences=state["g_sequences"],
            step=state["step"],
            training_config=TrainingConfig.from_dict(state["training_config"]),
            net_config=net_config,
            n_v=n_v,
            generator_state=gen.state_dict(),
            discriminator_state=disc.state_dict(),
            opt_g_arrays=opt_g,
            opt_d_arrays=opt_d,
            rng_state=state["rng_state"],
            stream_state=state["stream_state"],
        )

    def build_generator(self, device="cpu") -> Generator:
        gen = Generator(self.net_config, self.n_v).to(device)
        gen.load_state_dict(self.generator_state)
        return gen


def _load_batch(
    manifest: DatasetManifest,
    records,
    draws: list[tuple[int, int]],
    factor: int,
    config: TrainingConfig,
    device,
) -> tuple[torch.Tensor, torch.Tensor]:
    hrs, lrs = [], []
    for record_index, sample_seed in draws:
        seq = manifest.load(records[record_index])
        pair = make_pair(
            seq, factor, smooth_sigma=config.smooth_sigma, smooth_lr=config.smooth_lr
        )
        aug_rng = np.random.default_rng(sample_seed)
        h, w = pair.hr.spatial_shape
        turns = int(aug_rng.integers(0, 4)) if h == w else int(aug_rng.choice([0, 2]))
        mirror = bool(aug_rng.integers(0, 2))
        pair = augment(pair, turns, mirror)
        hrs.append(torch.from_numpy(pair.hr.values).permute(0, 3, 1, 2))
        lrs.append(torch.from_numpy(pair.lr.values).permute(0, 3, 1, 2))
    return torch.stack(hrs).to(device), torch.stack(lrs).to(device)


def train(
    config: TrainingConfig,
    manifest: DatasetManifest,
    *,
    net_config: NetworkConfig,
    n_v: int = 1,
    resume: Checkpoint | None = None,
    device: str = "cpu",
    on_losses: Callable[[dict], None] | None = None,
) -> Iterator[Checkpoint]:
    """Run the alternating schedule, yielding a checkpoint every interval.

    Five discriminator batches are trained per generator batch; every drawn
    sequence is randomly rotated and mirrored. The optimizer switches between
    phases exactly when the generator-sequence counter crosses a boundary.
    """
    records = manifest.split_records("train")
    if not records:
        raise DomainError("manifest has no training sequences")

    torch.manual_seed(config.seed)
    generator = Generator(net_config, n_v).to(device)
    discriminator = Discriminator(net_config, n_v).to(device)

    if resume is not None:
        generator.load_state_dict(resume.generator_state)
        discriminator.load_state_dict(resume.discriminator_state)
        g_sequences = resume.g_sequences
        step = resume.step
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        stream = SampleStream.from_state(len(records), config.seed, resume.stream_state)
    else:
        g_sequences = 0
        step = 0
        rng = np.random.default_rng(config.seed)
        stream = SampleStream(len(records), config.seed)

    phase_index = config.phase_index(g_sequences)
    opt_g = _build_optimizer(generator, config.phases[phase_index], config.adam_betas)
    opt_d = _build_optimizer(discriminator, config.phases[phase_index], config.adam_betas)
    if resume is not None:
        _load_optimizer_arrays(opt_g, generator, resume.opt_g_arrays)
        _load_optimizer_arrays(opt_d, discriminator, resume.opt_d_arrays)

    factor = net_config.factor

    def snapshot() -> Checkpoint:
        return Checkpoint(
            g_sequences=g_sequences,
            step=step,
            training_config=config,
            net_config=net_config,
            n_v=n_v,
            generator_state={
                k: v.detach().clone() for k, v in generator.state_dict().items()
            },
            discriminator_state={
                k: v.detach().clone() for k, v in discriminator.state_dict().items()
            },
            opt_g_arrays=_optimizer_arrays(opt_g, generator),
            opt_d_arrays=_optimizer_arrays(opt_d, discriminator),
            rng_state=rng.bit_generator.state,
            stream_state=stream.state,
        )

    while g_sequences < config.total_sequences:
        new_phase = config.phase_index(g_sequences)
        if new_phase != phase_index:
            phase_index = new_phase
            opt_g = _build_optimizer(generator, config.phases[phase_index], config.adam_betas)
            opt_d = _build_optimizer(discriminator, config.phases[phase_index], config.adam_betas)
        started = time.perf_counter()

        report = None
        for _ in range(config.d_steps_per_g):
            batch = _load_batch(
                manifest, records, stream.next_batch(config.batch_size),
                factor, config, device,
            )
            report = discriminator_step(
                generator, discriminator, opt_d, batch, rng, config, step=step
            )
        batch = _load_batch(
            manifest, records, stream.next_batch(config.batch_size),
            factor, config, device,
        )
        g_report = generator_step(
            generator, discriminator, opt_g, batch, rng, config, step=step
        )
        report.loss_g = g_report.loss_g
        report.phase = config.phases[phase_index].optimizer

        step += 1
        g_sequences += config.batch_size
        if on_losses is not None:
            on_losses(
                report.as_record(step, g_sequences, time.perf_counter() - started)
            )
        if (
            g_sequences % config.checkpoint_interval == 0
            or g_sequences >= config.total_sequences
        ):
            yield snapshot()


def append_log(path: str | Path, record: dict) -> None:
    """Append one line-delimited JSON record to the training log."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record) + "\n")


def read_log(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
