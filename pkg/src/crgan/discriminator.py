"""Dual-branch discriminator with attention fusion.

Branch one is a per-sample conditional DCGAN critic. Branch two stacks the
whole minibatch along a depth axis and runs strided 3D convolutions over it,
producing one score for the batch. A 2x2 affine layer with LeakyReLU turns
``(d1_i, d2)`` into weights ``(alpha_i, beta_i)`` and the output is
``alpha_i * d1_i + beta_i * d2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .generator import LEAKY_SLOPE, as_condition_tensor, dcgan_init_

BUDGET_FRACTION = 0.20


class ParameterBudgetError(ValueError):
    """Branch two is not small enough relative to branch one."""


@dataclass(frozen=True)
class DiscriminatorConfig:
    num_classes: int = 10
    base_channels: int = 24
    branch2_channels: tuple[int, ...] = (4, 8, 16)
    branch2_kernel: tuple[int, int, int] = (3, 4, 4)
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        object.__setattr__(self, "branch2_channels", tuple(self.branch2_channels))
        object.__setattr__(self, "branch2_kernel", tuple(self.branch2_kernel))
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError(f"base_channels must be an even number >= 2, got {self.base_channels}")
        if not self.branch2_channels:
            raise ValueError("branch2_channels must not be empty")


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class BranchOne(nn.Module):
    """Per-sample critic over 1x28x56 images with a spatially broadcast condition."""

    def __init__(self, num_classes: int, base_channels: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        c = base_channels
        self.num_classes = num_classes
        self.image_in = nn.Sequential(nn.Conv2d(1, c // 2, 4, 2, 1), nn.LeakyReLU(slope))  # 14 x 28
        self.cond_in = nn.Sequential(nn.Conv2d(num_classes, c // 2, 4, 2, 1), nn.LeakyReLU(slope))
        self.trunk = nn.Sequential(
            nn.Conv2d(c, 2 * c, 4, 2, 1, bias=False),  # 7 x 14
            nn.BatchNorm2d(2 * c),
            nn.LeakyReLU(slope),
            nn.Conv2d(2 * c, 4 * c, 4, 2, 1, bias=False),  # 3 x 7
            nn.BatchNorm2d(4 * c),
            nn.LeakyReLU(slope),
            # Receptive field grows from 22 to 46 px, so the middle unit spans the
            # centres of both digit cells. With a linear head over narrower features the
            # score is a sum of per-half terms, which cannot penalize a digit drawn twice.
            nn.Conv2d(4 * c, 8 * c, 4, 2, 1, bias=False),  # 1 x 3
            nn.BatchNorm2d(8 * c),
            nn.LeakyReLU(slope),
        )
        self.head = nn.Linear(8 * c * 3, 1)

    def forward(self, images: torch.Tensor, conditions: torch.Tensor) -> torch.Tensor:
        if conditions.shape[1] != self.num_classes:
            raise ValueError(f"condition length {conditions.shape[1]} != {self.num_classes}")
        h, w = images.shape[-2:]
        spatial = conditions[:, :, None, None].expand(-1, -1, h, w)
        feats = torch.cat([self.image_in(images), self.cond_in(spatial)], dim=1)
        return self.head(self.trunk(feats).flatten(1)).squeeze(1)


def to_batch_volume(images: torch.Tensor) -> torch.Tensor:
    """Stack ``B x 1 x H x W`` images into one ``1 x B x H x W`` volume (depth = batch order)."""
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError(f"expected B x 1 x H x W images, got {tuple(images.shape)}")
    if images.shape[0] < 2:
        raise ValueError("a batch volume needs at least 2 images")
    return images.permute(1, 0, 2, 3)


class BranchTwo(nn.Module):
    """Strided 3D convolutions over a batch volume, global average pool, affine head."""

    def __init__(self, channels=(4, 8, 16), kernel=(3, 4, 4), slope: float = LEAKY_SLOPE):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = 1
        for i, out_ch in enumerate(channels):
            # no BatchNorm on the input layer, as in DCGAN discriminators
            layers.append(nn.Conv3d(in_ch, out_ch, kernel, stride=2, padding=1, bias=i == 0))
            if i > 0:
                layers.append(nn.BatchNorm3d(out_ch))
            layers.append(nn.LeakyReLU(slope))
            in_ch = out_ch
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, 1)

    def forward(self, volume: torch.Tensor) -> torch.Tensor:
        if volume.ndim == 4:
            volume = volume.unsqueeze(0)
        if volume.shape[2] < 2:
            raise ValueError("batch volume depth must be >= 2")
        pooled = self.trunk(volume).mean(dim=(2, 3, 4))
        return self.head(pooled).squeeze(-1).squeeze(0)


@dataclass
class FusionParams:
    """Plain-array view of the attention layer: ``[alpha, beta] = lrelu(a @ [d1, d2] + b)``."""

    a: np.ndarray
    b: np.ndarray
    leaky_slope: float = LEAKY_SLOPE

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(2, 2)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(2)
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise ValueError("fusion parameters must be finite")


def fuse(fusion: FusionParams, d1, d2):
    """Weights and fused score for per-sample ``d1`` and shared batch score ``d2``.

    Returns ``(alpha, beta, fused)`` with the shape of ``d1``.
    """
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.broadcast_to(np.asarray(d2, dtype=np.float64), d1.shape)
    x = np.stack([d1, d2], axis=-1)
    pre = x @ fusion.a.T + fusion.b
    w = np.where(pre > 0, pre, fusion.leaky_slope * pre)
    alpha, beta = w[..., 0], w[..., 1]
    return alpha, beta, alpha * d1 + beta * d2


def fuse_gradients(fusion: FusionParams, d1: float, d2: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form d(fused)/d(a) and d(fused)/d(b) for one sample."""
    x = np.array([d1, d2], dtype=np.float64)
    pre = fusion.a @ x + fusion.b
    slope = np.where(pre > 0, 1.0, fusion.leaky_slope)
    # fused = sum_k x_k * lrelu(pre_k), so d/d pre_k = x_k * slope_k
    dpre = x * slope
    return np.outer(dpre, x), dpre


def fuse_tensors(weight: torch.Tensor, bias: torch.Tensor, d1: torch.Tensor, d2: torch.Tensor, slope: float):
    d2 = d2.expand_as(d1)
    pre = torch.stack([d1, d2], dim=-1) @ weight.T + bias
    w = F.leaky_relu(pre, slope)
    alpha, beta = w[..., 0], w[..., 1]
    return alpha, beta, alpha * d1 + beta * d2


class AttentionFusion(nn.Module):
    def __init__(self, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        # start at alpha = beta = 1, i.e. a plain sum of the two branches
        self.weight = nn.Parameter(torch.zeros(2, 2))
        self.bias = nn.Parameter(torch.ones(2))

    def forward(self, d1: torch.Tensor, d2: torch.Tensor):
        return fuse_tensors(self.weight, self.bias, d1, d2, self.slope)

    def params(self) -> FusionParams:
        return FusionParams(
            self.weight.detach().double().numpy().copy(), self.bias.detach().double().numpy().copy(), self.slope
        )

    def load_params(self, fusion: FusionParams) -> None:
        with torch.no_grad():
            self.weight.copy_(torch.from_numpy(fusion.a))
            self.bias.copy_(torch.from_numpy(fusion.b))
        self.slope = fusion.leaky_slope


@dataclass
class DiscriminatorOutput:
    d1: torch.Tensor  # B
    d2: torch.Tensor  # scalar
    alpha: torch.Tensor  # B
    beta: torch.Tensor  # B
    fused: torch.Tensor  # B

    def fusion_residual(self) -> float:
        """Largest ``|fused - (alpha*d1 + beta*d2)|``, recomputed outside the graph."""
        d1 = self.d1.detach().numpy()
        recomposed = self.alpha.detach().numpy() * d1 + self.beta.detach().numpy() * self.d2.detach().numpy()
        return float(np.max(np.abs(self.fused.detach().numpy() - recomposed)))


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.branch1 = BranchOne(config.num_classes, config.base_channels, config.leaky_slope)
        self.branch2 = BranchTwo(config.branch2_channels, config.branch2_kernel, config.leaky_slope)
        self.fusion = AttentionFusion(config.leaky_slope)
        n1, n2 = count_parameters(self.branch1), count_parameters(self.branch2)
        if not n2 < BUDGET_FRACTION * n1:
            raise ParameterBudgetError(
                f"branch two has {n2} parameters, must be < {BUDGET_FRACTION:.0%} of branch one's {n1}"
            )

    def parameter_counts(self) -> dict[str, int]:
        return {
            "branch1": count_parameters(self.branch1),
            "branch2": count_parameters(self.branch2),
            "fusion": count_parameters(self.fusion),
        }

    def forward(self, images: torch.Tensor, conditions: torch.Tensor, d2_enabled: bool = True) -> DiscriminatorOutput:
        if images.shape[0] < 2:
            raise ValueError("the discriminator needs batches of at least 2 images")
        d1 = self.branch1(images, conditions)
        if not d2_enabled:
            zero = d1.new_zeros(())
            return DiscriminatorOutput(d1, zero, torch.ones_like(d1), torch.zeros_like(d1), d1)
        d2 = self.branch2(to_batch_volume(images))
        alpha, beta, fused = self.fusion(d1, d2)
        return DiscriminatorOutput(d1, d2, alpha, beta, fused)


def init_discriminator(config: DiscriminatorConfig, seed: int) -> Discriminator:
    d = Discriminator(config)
    # the fusion layer keeps its alpha = beta = 1 start
    dcgan_init_(d.branch1, torch.Generator().manual_seed(seed))
    dcgan_init_(d.branch2, torch.Generator().manual_seed(seed + 1))
    return d


def set_mode(module: nn.Module, mode: str) -> None:
    if mode == "train":
        module.train()
    elif mode == "eval":
        module.eval()
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def branch1_forward(disc: Discriminator, images: torch.Tensor, conditions, mode: str = "eval") -> torch.Tensor:
    set_mode(disc, mode)
    if mode == "train" and images.shape[0] < 2:
        raise ValueError("train mode needs at least 2 samples for batch statistics")
    return disc.branch1(images, as_condition_tensor(conditions))


def branch2_forward(disc: Discriminator, volume: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    set_mode(disc, mode)
    return disc.branch2(volume)


def discriminator_forward(disc: Discriminator, images: torch.Tensor, conditions, mode: str = "train", d2_enabled: bool = True) -> DiscriminatorOutput:
    set_mode(disc, mode)
    return disc(images, as_condition_tensor(conditions), d2_enabled=d2_enabled)
