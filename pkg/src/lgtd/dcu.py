"""Difference compensation unit: refine a compensated feature against a guide."""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .common import ResidualBranch, check_same_shape, conv3x3


class DCU(nn.Module):
    """out = guide + branch(guide - comp).

    ``branch`` is conv-ReLU-conv with a zero-initialised last conv, so a fresh
    unit returns ``guide`` untouched whatever ``comp`` is.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.branch = ResidualBranch(channels, zero_tail=True)

    def forward(self, guide: Tensor, comp: Tensor) -> Tensor:
        check_same_shape(guide, comp, "DCU")
        return guide + self.branch(guide - comp)


class DirectFusion(nn.Module):
    """Ablation stand-in for a DCU: concatenate and fuse with one 3x3 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = conv3x3(2 * channels, channels)

    def forward(self, guide: Tensor, comp: Tensor) -> Tensor:
        check_same_shape(guide, comp, "DirectFusion")
        return self.fuse(torch.cat([guide, comp], dim=1))


def dcu(guide: Tensor, comp: Tensor, unit: DCU) -> Tensor:
    return unit(guide, comp)


def refine_chain(f_t: Tensor, g_s: Tensor, f_l: Tensor, first: nn.Module, second: nn.Module) -> Tensor:
    """F_s = first(F_t, g_s); F_hat = second(F_s, F_l)."""
    check_same_shape(f_t, g_s, "refine_chain")
    check_same_shape(f_t, f_l, "refine_chain")
    return second(first(f_t, g_s), f_l)
