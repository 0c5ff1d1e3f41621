"""Conditional DCGAN generator for 28 x 56 paired-digit images.

Noise and condition each go through their own transposed-convolution layer
(1x1 -> 4x7), the two feature maps are concatenated, and three stride-2
transposed convolutions upsample to 32x56. The output is cropped to 28x56.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .conditioning import check_condition

LEAKY_SLOPE = 0.2
INIT_STD = 0.02
CROP_TOP = 2  # 32 rows -> 28; two rows off the top and two off the bottom


@dataclass(frozen=True)
class GeneratorConfig:
    noise_dim: int = 100
    num_classes: int = 10
    base_channels: int = 64
    output_shape: tuple[int, int, int] = (1, 28, 56)

    def __post_init__(self):
        if self.noise_dim < 1:
            raise ValueError(f"noise_dim must be >= 1, got {self.noise_dim}")
        if self.base_channels < 8:
            raise ValueError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if tuple(self.output_shape) != (1, 28, 56):
            raise ValueError(f"only 1x28x56 output is supported, got {self.output_shape}")


def _up(in_ch: int, out_ch: int, **kw) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, bias=False, **kw),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        # base_channels is the last hidden width (DCGAN "ngf"); widths double going back
        self.noise_in = _up(config.noise_dim, 2 * c, kernel_size=(4, 7))
        self.cond_in = _up(config.num_classes, 2 * c, kernel_size=(4, 7))
        self.trunk = nn.Sequential(
            _up(4 * c, 2 * c, kernel_size=4, stride=2, padding=1),  # 8 x 14
            _up(2 * c, c, kernel_size=4, stride=2, padding=1),  # 16 x 28
            nn.ConvTranspose2d(c, 1, kernel_size=4, stride=2, padding=1),  # 32 x 56
            nn.Tanh(),
        )

    def forward(self, noise: torch.Tensor, conditions: torch.Tensor) -> torch.Tensor:
        if noise.shape[0] != conditions.shape[0]:
            raise ValueError(f"{noise.shape[0]} noise rows but {conditions.shape[0]} conditions")
        if conditions.shape[1] != self.config.num_classes:
            raise ValueError(f"condition length {conditions.shape[1]} != {self.config.num_classes}")
        h = torch.cat(
            [self.noise_in(noise[:, :, None, None]), self.cond_in(conditions[:, :, None, None])],
            dim=1,
        )
        out = self.trunk(h)
        return out[:, :, CROP_TOP : CROP_TOP + 28, :]


def dcgan_init_(module: nn.Module, generator: torch.Generator) -> None:
    """Normal(0, 0.02) weights for conv/linear layers, zero biases, BatchNorm at (1, 0)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, INIT_STD, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.modules.batchnorm._BatchNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_generator(config: GeneratorConfig, seed: int) -> Generator:
    g = Generator(config)
    dcgan_init_(g, torch.Generator().manual_seed(seed))
    return g


def as_condition_tensor(conditions) -> torch.Tensor:
    if isinstance(conditions, torch.Tensor):
        return conditions.to(torch.float32)
    return torch.from_numpy(check_condition(conditions).astype("float32"))


def generate(gen: Generator, noise: torch.Tensor, conditions, mode: str = "eval") -> torch.Tensor:
    """Run the generator in ``"train"`` or ``"eval"`` mode without tracking gradients.

    Train mode uses batch statistics and updates BatchNorm running averages.
    """
    cond = as_condition_tensor(conditions)
    if mode == "train":
        if noise.shape[0] < 2:
            raise ValueError("train mode needs at least 2 samples for batch statistics")
        gen.train()
    elif mode == "eval":
        gen.eval()
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    with torch.no_grad():
        return gen(noise, cond)
