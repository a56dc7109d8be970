"""Long-term temporal difference module (global motion from forward/backward sequences)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .align import AlignedStack
from .common import check_same_shape, conv1x1, conv3x3, down2, up2, zero_


@dataclass
class GlobalDifference:
    forward: Tensor   # D_f
    backward: Tensor  # D_b


@dataclass
class ActivationMaps:
    att_f: Tensor | None
    att_b: Tensor | None
    gate: Tensor


def cross_difference(f_fwd: Tensor, f_bwd: Tensor) -> GlobalDifference:
    check_same_shape(f_fwd, f_bwd, "cross_difference")
    return GlobalDifference(f_fwd - f_bwd, f_bwd - f_fwd)


class ActivationBranch(nn.Module):
    """sigmoid(conv(D + conv(D) + up(conv(pool(D))))).

    The output conv starts at zero, so a fresh branch emits 0.5 everywhere.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.same_scale = conv3x3(channels, channels)
        self.small_scale = conv3x3(channels, channels)
        self.out = zero_(conv3x3(channels, channels))

    def forward(self, d: Tensor) -> Tensor:
        h, w = d.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"activation needs even spatial dims, got {h}x{w}")
        s = d + self.same_scale(d) + up2(self.small_scale(down2(d)))
        return torch.sigmoid(self.out(s))


def activate(d: Tensor, branch: ActivationBranch) -> Tensor:
    return branch(d)


class LTDM(nn.Module):
    def __init__(self, channels: int, frames: int, mode: str = "diff", direction: str = "both",
                 alpha: float = 0.5, beta: float = 0.5):
        super().__init__()
        if mode not in ("diff", "concat"):
            raise ValueError(f"ltdm mode must be 'diff' or 'concat', got {mode!r}")
        if direction not in ("both", "forward", "backward"):
            raise ValueError(f"ltdm direction must be both/forward/backward, got {direction!r}")
        if alpha < 0 or beta < 0:
            raise ValueError(f"balance coefficients must be >= 0, got alpha={alpha}, beta={beta}")
        self.mode, self.direction = mode, direction
        self.alpha, self.beta = alpha, beta
        # One smoothing path serves both orders.
        self.squeeze = conv1x1(frames * channels, channels)
        self.blend = conv3x3(channels, channels)
        if mode == "concat":
            self.fuse = conv3x3(2 * channels, channels)
        self.act_f = ActivationBranch(channels) if direction in ("both", "forward") else None
        self.act_b = ActivationBranch(channels) if direction in ("both", "backward") else None

    def smooth(self, seq: Tensor) -> Tensor:
        """(B, T, C, H, W) -> (B, C, H, W) via 1x1 over concatenated frames, then 3x3."""
        return self.blend(self.squeeze(seq.flatten(1, 2)))

    def differences(self, f_fwd: Tensor, f_bwd: Tensor) -> GlobalDifference:
        if self.mode == "diff":
            return cross_difference(f_fwd, f_bwd)
        fused = self.fuse(torch.cat([f_fwd, f_bwd], dim=1))
        return GlobalDifference(fused, fused)

    def activations(self, f_fwd: Tensor, f_bwd: Tensor, alpha: float | None = None,
                    beta: float | None = None) -> ActivationMaps:
        alpha = self.alpha if alpha is None else alpha
        beta = self.beta if beta is None else beta
        diff = self.differences(f_fwd, f_bwd)
        att_f = self.act_f(diff.forward) if self.act_f is not None else None
        att_b = self.act_b(diff.backward) if self.act_b is not None else None
        if self.direction == "forward":
            gate = att_f
        elif self.direction == "backward":
            gate = att_b
        else:
            gate = alpha * att_f + beta * att_b
        return ActivationMaps(att_f, att_b, gate)

    def forward(self, stack: AlignedStack, alpha: float | None = None, beta: float | None = None) -> Tensor:
        f_fwd = self.smooth(stack.forward)
        f_bwd = self.smooth(stack.backward)
        maps = self.activations(f_fwd, f_bwd, alpha, beta)
        modulated = f_fwd if self.direction == "forward" else f_bwd
        return modulated * maps.gate + modulated


def ltdm_forward(stack: AlignedStack, module: LTDM, alpha: float = 0.5, beta: float = 0.5) -> Tensor:
    if alpha < 0 or beta < 0:
        raise ValueError(f"balance coefficients must be >= 0, got alpha={alpha}, beta={beta}")
    return module(stack, alpha, beta)
