"""Adversarial training: GAN losses, Adam updates, telemetry, and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .conditioning import sample_distinct_pairs
from .dataset import LabeledBatch, PairDataset, batches_per_epoch, iter_epoch
from .discriminator import Discriminator, DiscriminatorConfig, DiscriminatorOutput, init_discriminator
from .generator import Generator, GeneratorConfig, init_generator

log = logging.getLogger(__name__)

TELEMETRY_HEADER = "step d_loss g_loss mean_alpha mean_beta d2_real d2_fake"
FUSION_TOLERANCE = 1e-6
G_LOSSES = ("non_saturating", "minimax")

# fields that change parameter shapes or the meaning of stored tensors
_ARCH_FIELDS = ("noise_dim", "num_classes", "g_base_channels", "d_base_channels", "d2_enabled")


class NonFiniteError(FloatingPointError):
    """A loss or parameter became NaN or infinite."""

    def __init__(self, message: str, checkpoint_path: str | None = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class FusionIdentityError(AssertionError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0002
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 20
    noise_dim: int = 100
    seed: int = 0
    d2_enabled: bool = True
    d_steps_per_g_step: int = 1
    n_samples: int = 60000
    num_classes: int = 10
    g_base_channels: int = 64
    d_base_channels: int = 24
    g_loss: str = "non_saturating"
    lr_g: float | None = None
    lr_d: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        for name in ("lr_g", "lr_d"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0 <= self.beta1 < self.beta2 < 1:
            raise ValueError(f"need 0 <= beta1 < beta2 < 1, got {self.beta1}, {self.beta2}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1 or self.d_steps_per_g_step < 1 or self.n_samples < 1:
            raise ValueError("epochs, d_steps_per_g_step and n_samples must be >= 1")
        if self.g_loss not in G_LOSSES:
            raise ValueError(f"g_loss must be one of {G_LOSSES}, got {self.g_loss!r}")

    @property
    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.noise_dim, self.num_classes, self.g_base_channels)

    @property
    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.num_classes, self.d_base_channels)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite {what}")


def gan_d_loss(real_logits, fake_logits) -> torch.Tensor:
    """Batch-mean sigmoid cross-entropy, target 1 for real and 0 for fake, summed.

    ``softplus(-x) = -log(sigmoid(x))`` keeps this stable for large logits.
    """
    real_logits, fake_logits = torch.as_tensor(real_logits), torch.as_tensor(fake_logits)
    if torch.isnan(real_logits).any() or torch.isnan(fake_logits).any():
        raise NonFiniteError("NaN discriminator logits")
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def gan_g_loss(fake_logits, kind: str = "non_saturating") -> torch.Tensor:
    """Generator loss. ``non_saturating``: -log D(G(z)); ``minimax``: log(1 - D(G(z)))."""
    fake_logits = torch.as_tensor(fake_logits)
    if torch.isnan(fake_logits).any():
        raise NonFiniteError("NaN generator logits")
    if kind == "non_saturating":
        return F.softplus(-fake_logits).mean()
    if kind == "minimax":
        return -F.softplus(fake_logits).mean()
    raise ValueError(f"unknown generator loss {kind!r}")


@dataclass
class StepTelemetry:
    step: int
    d_loss: float
    g_loss: float
    mean_alpha: float
    mean_beta: float
    d2_real: float
    d2_fake: float
    fusion_residual: float = 0.0  # kept in memory only; not part of the file format

    def to_line(self) -> str:
        values = (self.d_loss, self.g_loss, self.mean_alpha, self.mean_beta, self.d2_real, self.d2_fake)
        return " ".join([str(self.step)] + [repr(float(v)) for v in values])

    @classmethod
    def from_line(cls, line: str) -> "StepTelemetry":
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"expected 7 fields, got {len(parts)}")
        return cls(int(parts[0]), *(float(p) for p in parts[1:]))


@dataclass
class TrainState:
    config: TrainConfig
    gen: Generator
    disc: Discriminator
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    noise_rng: torch.Generator
    cond_rng: np.random.Generator
    step: int = 0
    max_fusion_residual: float = 0.0


def _adam(params, lr: float, config: TrainConfig) -> torch.optim.Adam:
    # foreach=False keeps the per-parameter update order fixed
    return torch.optim.Adam(params, lr=lr, betas=(config.beta1, config.beta2), foreach=False)


def new_state(config: TrainConfig) -> TrainState:
    gen = init_generator(config.generator_config, config.seed)
    disc = init_discriminator(config.discriminator_config, config.seed + 100)
    return TrainState(
        config=config,
        gen=gen,
        disc=disc,
        opt_g=_adam(gen.parameters(), config.lr_g or config.lr, config),
        opt_d=_adam(disc.parameters(), config.lr_d or config.lr, config),
        noise_rng=torch.Generator().manual_seed(config.seed + 200),
        cond_rng=np.random.default_rng([config.seed, 300]),
    )


def _fake_batch(state: TrainState, n: int) -> tuple[torch.Tensor, torch.Tensor]:
    cfg = state.config
    cond = torch.from_numpy(sample_distinct_pairs(state.cond_rng, n, cfg.num_classes).astype(np.float32))
    noise = torch.randn(n, cfg.noise_dim, generator=state.noise_rng)
    return noise, cond


def _run_d(state: TrainState, images: torch.Tensor, cond: torch.Tensor) -> DiscriminatorOutput:
    out = state.disc(images, cond, d2_enabled=state.config.d2_enabled)
    residual = out.fusion_residual()
    if residual > FUSION_TOLERANCE:
        raise FusionIdentityError(f"fused output deviates from alpha*d1 + beta*d2 by {residual:.3g}")
    state.max_fusion_residual = max(state.max_fusion_residual, residual)
    return out


def train_step(state: TrainState, batch: LabeledBatch) -> tuple[TrainState, StepTelemetry]:
    """One generator update preceded by ``d_steps_per_g_step`` discriminator updates."""
    cfg = state.config
    if len(batch) != cfg.batch_size:
        raise ValueError(f"batch has {len(batch)} samples, config expects {cfg.batch_size}")
    real = torch.as_tensor(batch.images)
    real_cond = torch.from_numpy(np.asarray(batch.conditions, dtype=np.float32))
    B = cfg.batch_size
    state.gen.train()
    state.disc.train()

    for p in state.disc.parameters():
        p.requires_grad_(True)
    for _ in range(cfg.d_steps_per_g_step):
        noise, cond = _fake_batch(state, B)
        with torch.no_grad():
            fake = state.gen(noise, cond)
        # real and fake go through as separate pure batches (separate volumes for branch two)
        out_real = _run_d(state, real, real_cond)
        out_fake = _run_d(state, fake, cond)
        d_loss = gan_d_loss(out_real.fused, out_fake.fused)
        _check_finite(d_loss, "discriminator loss")
        state.opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        state.opt_d.step()

    for p in state.disc.parameters():
        p.requires_grad_(False)
    noise, cond = _fake_batch(state, B)
    out_g = _run_d(state, state.gen(noise, cond), cond)
    g_loss = gan_g_loss(out_g.fused, cfg.g_loss)
    _check_finite(g_loss, "generator loss")
    state.opt_g.zero_grad(set_to_none=True)
    g_loss.backward()
    state.opt_g.step()
    for p in state.disc.parameters():
        p.requires_grad_(True)

    for name, p in list(state.gen.named_parameters()) + list(state.disc.named_parameters()):
        _check_finite(p.detach(), f"parameter {name}")

    state.step += 1
    alphas = torch.cat([out_real.alpha, out_fake.alpha]).detach()
    betas = torch.cat([out_real.beta, out_fake.beta]).detach()
    tel = StepTelemetry(
        step=state.step,
        d_loss=float(d_loss.detach()),
        g_loss=float(g_loss.detach()),
        mean_alpha=float(alphas.mean()),
        mean_beta=float(betas.mean()),
        d2_real=float(out_real.d2.detach()),
        d2_fake=float(out_fake.d2.detach()),
        fusion_residual=state.max_fusion_residual,
    )
    return state, tel


# --- checkpoints -----------------------------------------------------------


def _optimizer_tensors(prefix: str, opt: torch.optim.Adam, named_params) -> dict[str, np.ndarray]:
    out = {}
    for name, p in named_params:
        st = opt.state.get(p)
        if not st:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            out[f"{prefix}/{name}/{key}"] = torch.as_tensor(st[key]).detach().numpy().copy()
    return out


def _restore_optimizer(prefix: str, opt: torch.optim.Adam, named_params, tensors: dict[str, np.ndarray]) -> None:
    opt.state.clear()
    for name, p in named_params:
        key = f"{prefix}/{name}/step"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[key]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(tensors[f"{prefix}/{name}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"{prefix}/{name}/exp_avg_sq"].copy()),
        }


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = {}
    for prefix, module in (("gen", state.gen), ("disc", state.disc)):
        for name, t in module.state_dict().items():
            tensors[f"{prefix}/{name}"] = t.detach().numpy().copy()
    tensors.update(_optimizer_tensors("opt_g", state.opt_g, state.gen.named_parameters()))
    tensors.update(_optimizer_tensors("opt_d", state.opt_d, state.disc.named_parameters()))
    return tensors


def save_checkpoint(state: TrainState, path) -> None:
    meta = {
        "kind": "gan",
        "config": state.config.to_dict(),
        "step": state.step,
        "max_fusion_residual": state.max_fusion_residual,
        "rng": {
            "noise": state.noise_rng.get_state().numpy().tobytes().hex(),
            "cond": state.cond_rng.bit_generator.state,
        },
    }
    ckpt.write_container(path, meta, state_tensors(state))


def load_checkpoint(path, expect: TrainConfig | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; ``expect`` must agree on architecture fields."""
    meta, tensors = ckpt.read_container(path)
    if meta.get("kind") != "gan":
        raise ckpt.CheckpointCompatibilityError(f"{os.fspath(path)}: not a GAN checkpoint (kind={meta.get('kind')!r})")
    config = TrainConfig.from_dict(meta["config"])
    if expect is not None:
        diffs = [f for f in _ARCH_FIELDS if getattr(expect, f) != getattr(config, f)]
        if diffs:
            detail = ", ".join(f"{f}: checkpoint={getattr(config, f)!r} requested={getattr(expect, f)!r}" for f in diffs)
            raise ckpt.CheckpointCompatibilityError(f"{os.fspath(path)}: incompatible configuration ({detail})")
        config = expect
    state = new_state(config)
    for prefix, module in (("gen", state.gen), ("disc", state.disc)):
        sd = {}
        for name, t in module.state_dict().items():
            key = f"{prefix}/{name}"
            if key not in tensors:
                raise ckpt.CheckpointCompatibilityError(f"{os.fspath(path)}: missing tensor {key}")
            sd[name] = torch.from_numpy(tensors[key].copy()).to(t.dtype)
        module.load_state_dict(sd)
    _restore_optimizer("opt_g", state.opt_g, state.gen.named_parameters(), tensors)
    _restore_optimizer("opt_d", state.opt_d, state.disc.named_parameters(), tensors)
    noise_state = torch.frombuffer(bytearray(bytes.fromhex(meta["rng"]["noise"])), dtype=torch.uint8)
    state.noise_rng.set_state(noise_state)
    state.cond_rng.bit_generator.state = meta["rng"]["cond"]
    state.step = int(meta["step"])
    state.max_fusion_residual = float(meta.get("max_fusion_residual", 0.0))
    return state


# --- telemetry -------------------------------------------------------------


def read_telemetry(path) -> list[StepTelemetry]:
    with open(path, encoding="utf-8") as fh:
        return parse_telemetry(fh.read().splitlines())


def parse_telemetry(lines) -> list[StepTelemetry]:
    lines = list(lines)
    if not lines or lines[0].strip() != TELEMETRY_HEADER:
        raise ValueError(f"line 1: expected header {TELEMETRY_HEADER!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            out.append(StepTelemetry.from_line(line))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return out


def _open_telemetry(path, resume_step: int):
    """Open the telemetry file for appending, dropping lines past ``resume_step``."""
    if resume_step > 0 and os.path.exists(path):
        kept = [t for t in read_telemetry(path) if t.step <= resume_step]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(TELEMETRY_HEADER + "\n")
            fh.writelines(t.to_line() + "\n" for t in kept)
        return open(path, "a", encoding="utf-8")
    fh = open(path, "w", encoding="utf-8")
    fh.write(TELEMETRY_HEADER + "\n")
    return fh


@dataclass
class TrainResult:
    state: TrainState
    telemetry: list[StepTelemetry] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)


def set_single_threaded() -> None:
    """Pin torch to one thread; the mode in which runs are bitwise reproducible."""
    torch.set_num_threads(1)


def train(
    config: TrainConfig,
    dataset: PairDataset,
    out_dir=None,
    checkpoint_interval: int | None = None,
    resume_from=None,
    max_steps: int | None = None,
    on_checkpoint: Callable[[TrainState, str], None] | None = None,
    progress_every: int = 0,
) -> TrainResult:
    """Run ``epochs x batches_per_epoch`` steps, optionally checkpointing into ``out_dir``.

    ``max_steps`` stops early (used to simulate interruption). Resuming from a
    checkpoint reproduces the uninterrupted run step for step.
    """
    spe = batches_per_epoch(len(dataset), config.batch_size)
    if spe == 0:
        raise ValueError(f"dataset of {len(dataset)} samples is smaller than one batch")
    total = config.epochs * spe
    state = load_checkpoint(resume_from, expect=config) if resume_from is not None else new_state(config)
    result = TrainResult(state)
    telemetry_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        telemetry_fh = _open_telemetry(os.path.join(out_dir, "telemetry.txt"), state.step)

    def checkpoint_now() -> str | None:
        if out_dir is None:
            return None
        path = os.path.join(out_dir, f"step_{state.step:07d}.ckpt")
        save_checkpoint(state, path)
        result.checkpoints.append(path)
        if on_checkpoint is not None:
            on_checkpoint(state, path)
        return path

    try:
        while state.step < total and (max_steps is None or state.step < max_steps):
            epoch, start = divmod(state.step, spe)
            for batch in iter_epoch(dataset, config.batch_size, config.seed, epoch, start):
                try:
                    _, tel = train_step(state, batch)
                except NonFiniteError as exc:
                    exc.checkpoint_path = checkpoint_now()
                    raise
                result.telemetry.append(tel)
                if telemetry_fh is not None:
                    telemetry_fh.write(tel.to_line() + "\n")
                if progress_every and state.step % progress_every == 0:
                    log.info("step %d/%d d_loss %.4f g_loss %.4f alpha %.3f beta %.3f",
                             state.step, total, tel.d_loss, tel.g_loss, tel.mean_alpha, tel.mean_beta)
                if checkpoint_interval and state.step % checkpoint_interval == 0 and state.step < total:
                    if telemetry_fh is not None:
                        telemetry_fh.flush()
                    checkpoint_now()
                if state.step >= total or (max_steps is not None and state.step >= max_steps):
                    break
        if telemetry_fh is not None:
            telemetry_fh.flush()
        checkpoint_now()
    finally:
        if telemetry_fh is not None:
            telemetry_fh.close()
    return result


def sample_images(gen: Generator, conditions: np.ndarray, seed: int, noise_dim: int | None = None) -> torch.Tensor:
    """Eval-mode samples for a ``B x C`` condition stack, noise drawn from ``seed``."""
    noise_dim = noise_dim or gen.config.noise_dim
    noise = torch.randn(len(conditions), noise_dim, generator=torch.Generator().manual_seed(seed))
    gen.eval()
    with torch.no_grad():
        return gen(noise, torch.from_numpy(np.asarray(conditions, dtype=np.float32)))
