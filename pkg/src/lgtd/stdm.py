"""Short-term temporal difference module (local motion from adjacent frames)."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .common import ResBlock, conv3x3, down2, up2


def _offsets(n: int) -> list[int]:
    return list(range(-n, 0)) + list(range(1, n + 1))


def _check_window(frames: Tensor, n: int) -> int:
    T = frames.shape[-4]
    if T % 2 == 0:
        raise ValueError(f"clip length must be odd (2N+1), got {T}")
    if T != 2 * n + 1:
        raise ValueError(f"clip length {T} does not match N={n}")
    return T // 2


def rgb_differences(frames: Tensor, n: int) -> Tensor:
    """Signed adjacent-frame differences, ordered -N..-1, +1..+N.

    ``frames`` is ``(..., T, 3, H, W)``. Each map subtracts the neighbour one
    step closer to the centre: ``I[t+i] - I[t+i+1]`` for i < 0 and
    ``I[t+i] - I[t+i-1]`` for i > 0.
    """
    t = _check_window(frames, n)
    maps = []
    for i in _offsets(n):
        nearer = t + i + 1 if i < 0 else t + i - 1
        maps.append(frames[..., t + i, :, :, :] - frames[..., nearer, :, :, :])
    return torch.stack(maps, dim=-4)


def adjacent_pairs(frames: Tensor, n: int) -> Tensor:
    """Concatenation counterpart of ``rgb_differences``: ``[I[t+i], nearer]`` on channels."""
    t = _check_window(frames, n)
    maps = []
    for i in _offsets(n):
        nearer = t + i + 1 if i < 0 else t + i - 1
        maps.append(torch.cat([frames[..., t + i, :, :, :], frames[..., nearer, :, :, :]], dim=-3))
    return torch.stack(maps, dim=-4)


@dataclass
class DifferencePack:
    diffs: Tensor  # (B, 2N, C, H/2, W/2)
    fused: Tensor  # (B, C, H/2, W/2), the local motion representation


class DifferenceEncoder(nn.Module):
    """Shared conv + x2 average pool per map, then a 3x3 fusion conv over all maps."""

    def __init__(self, channels: int, n: int, in_channels: int = 3):
        super().__init__()
        self.n = n
        self.conv = conv3x3(in_channels, channels)
        self.fusion = conv3x3(2 * n * channels, channels)
        with torch.no_grad():
            self.conv.bias.zero_()
            self.fusion.bias.zero_()

    def forward(self, raw: Tensor) -> DifferencePack:
        if raw.dim() == 4:
            raw = raw.unsqueeze(0)
        b, m, c, h, w = raw.shape
        if m != 2 * self.n:
            raise ValueError(f"expected {2 * self.n} maps, got {m}")
        enc = down2(self.conv(raw.reshape(b * m, c, h, w)))
        enc = enc.reshape(b, m, *enc.shape[1:])
        fused = self.fusion(enc.flatten(1, 2))
        return DifferencePack(enc, fused)


class STDM(nn.Module):
    """Two-stage injection of local motion into the target feature.

    ``mode="concat"`` feeds stacked adjacent frame pairs instead of their
    differences (ablation only).
    """

    def __init__(self, channels: int, n: int, mode: str = "diff"):
        super().__init__()
        if mode not in ("diff", "concat"):
            raise ValueError(f"stdm mode must be 'diff' or 'concat', got {mode!r}")
        self.n, self.mode = n, mode
        self.encoder = DifferenceEncoder(channels, n, 3 if mode == "diff" else 6)
        self.res1 = ResBlock(channels, zero_tail=True)
        self.res2 = ResBlock(channels, zero_tail=True)

    def encode(self, frames: Tensor) -> DifferencePack:
        raw = rgb_differences(frames, self.n) if self.mode == "diff" else adjacent_pairs(frames, self.n)
        return self.encoder(raw)

    def forward(self, frames: Tensor, f_t: Tensor) -> Tensor:
        pack = self.encode(frames)
        d_up = up2(pack.fused)
        if d_up.shape != f_t.shape:
            raise ValueError(f"upsampled motion {tuple(d_up.shape)} does not match target feature {tuple(f_t.shape)}")
        f_1 = f_t + d_up
        return self.res1(f_1) + up2(self.res2(pack.fused))


def stdm_forward(frames: Tensor, f_t: Tensor, module: STDM) -> Tensor:
    return module(frames, f_t)
