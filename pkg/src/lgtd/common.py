"""Small building blocks shared by every LGTD sub-network."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def conv3x3(cin: int, cout: int, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=3, padding=1, bias=bias)


def conv1x1(cin: int, cout: int, bias: bool = True) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, kernel_size=1, padding=0, bias=bias)


def zero_(module: nn.Module) -> nn.Module:
    """Zero every parameter of ``module`` in place and return it."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def up2(x: Tensor) -> Tensor:
    """x2 bilinear upsampling (half-pixel centres)."""
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def down2(x: Tensor) -> Tensor:
    """x2 average pooling; rejects odd spatial sizes."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError(f"x2 pooling needs even spatial dims, got {h}x{w}")
    return F.avg_pool2d(x, 2)


class ResidualBranch(nn.Module):
    """conv3x3 -> ReLU -> conv3x3, no skip. ``zero_tail`` zeroes the last conv."""

    def __init__(self, channels: int, zero_tail: bool = True):
        super().__init__()
        self.conv1 = conv3x3(channels, channels)
        self.conv2 = conv3x3(channels, channels)
        if zero_tail:
            zero_(self.conv2)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(F.relu(self.conv1(x)))


class ResBlock(nn.Module):
    """Plain residual block: x + conv(relu(conv(x)))."""

    def __init__(self, channels: int, zero_tail: bool = False):
        super().__init__()
        self.body = ResidualBranch(channels, zero_tail=zero_tail)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


def check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def randomize_(module: nn.Module, seed: int, std: float = 0.2) -> nn.Module:
    """Overwrite all parameters with seeded normal noise.

    Used by the gradient and composition oracles so that zero-initialised
    tails do not make a check vacuous.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * std)
    return module
