"""Per-frame feature extraction and lightweight two-level deformable alignment."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .common import ResBlock, conv3x3, down2, up2, zero_

MAX_DISPLACEMENT = 16.0


def _bilinear_gather(x: Tensor, py: Tensor, px: Tensor) -> Tensor:
    """Sample ``x`` (B, C, H, W) at real positions py, px (B, ...) with zero padding."""
    b, c, h, w = x.shape
    flat = x.reshape(b, c, h * w)
    y0 = torch.floor(py)
    x0 = torch.floor(px)
    wy1, wx1 = py - y0, px - x0
    wy0, wx0 = 1 - wy1, 1 - wx1
    y0, x0 = y0.long(), x0.long()
    out = 0
    for yc, wy in ((y0, wy0), (y0 + 1, wy1)):
        for xc, wx in ((x0, wx0), (x0 + 1, wx1)):
            valid = (yc >= 0) & (yc < h) & (xc >= 0) & (xc < w)
            idx = (yc.clamp(0, h - 1) * w + xc.clamp(0, w - 1)).reshape(b, 1, -1).expand(b, c, -1)
            vals = flat.gather(2, idx).reshape(b, c, *py.shape[1:])
            weight = (wy * wx * valid.to(x.dtype)).unsqueeze(1)
            out = out + vals * weight
    return out


def deformable_conv(x: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor | None = None,
                    max_disp: float | None = None) -> Tensor:
    """Stride-1 'same' deformable convolution without modulation masks.

    ``offsets`` is ``(B, 2*K*K, H, W)`` holding ``(dy, dx)`` per kernel tap in
    row-major tap order (the torchvision layout). Each tap samples ``x`` at its
    regular grid position plus the offset, bilinearly, reading zeros outside
    the image.
    """
    b, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ValueError(f"weight expects {cin} input channels, got {c}")
    if offsets.shape != (b, 2 * kh * kw, h, w):
        raise ValueError(f"offset field must be {(b, 2 * kh * kw, h, w)}, got {tuple(offsets.shape)}")
    if not torch.isfinite(offsets).all():
        raise ValueError("offset field contains non-finite values")
    if max_disp is not None:
        offsets = offsets.clamp(-max_disp, max_disp)
    off = offsets.reshape(b, kh * kw, 2, h, w)
    ky, kx = torch.meshgrid(torch.arange(kh) - kh // 2, torch.arange(kw) - kw // 2, indexing="ij")
    gy, gx = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    base_y = (gy[None] + ky.reshape(-1, 1, 1)).to(x.dtype)  # (KK, H, W)
    base_x = (gx[None] + kx.reshape(-1, 1, 1)).to(x.dtype)
    cols = _bilinear_gather(x, base_y + off[:, :, 0], base_x + off[:, :, 1])  # (B, C, KK, H, W)
    out = torch.einsum("bckhw,ock->bohw", cols, weight.reshape(cout, cin, kh * kw))
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


class FeatureExtractor(nn.Module):
    """Shared per-frame encoder: one 3x3 conv followed by residual blocks."""

    def __init__(self, channels: int, num_blocks: int = 5):
        super().__init__()
        self.head = conv3x3(3, channels)
        self.blocks = nn.Sequential(*[ResBlock(channels) for _ in range(num_blocks)])

    def forward(self, frames: Tensor) -> Tensor:
        b, t = frames.shape[:2]
        feats = self.blocks(self.head(frames.flatten(0, 1)))
        return feats.reshape(b, t, *feats.shape[1:])


class OffsetPredictor(nn.Module):
    def __init__(self, cin: int, channels: int, taps: int):
        super().__init__()
        self.conv1 = conv3x3(cin, channels)
        self.conv2 = zero_(conv3x3(channels, 2 * taps))

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(F.leaky_relu(self.conv1(x), 0.1))


@dataclass
class AlignedStack:
    forward: Tensor  # (B, T, C, H, W)

    @property
    def backward(self) -> Tensor:
        return self.forward.flip(1)

    def __len__(self) -> int:
        return self.forward.shape[1]


class CoarseAligner(nn.Module):
    """Aligns every frame feature toward the centre one.

    Offsets are first predicted at half resolution from ``[neighbour, target]``,
    upsampled (values doubled) and refined at full resolution. The target's own
    entry uses zero offsets, i.e. the same conv without deformation.
    """

    def __init__(self, channels: int, kernel_size: int = 3, max_disp: float = MAX_DISPLACEMENT):
        super().__init__()
        taps = kernel_size * kernel_size
        self.max_disp = max_disp
        self.coarse = OffsetPredictor(2 * channels, channels, taps)
        self.fine = OffsetPredictor(2 * channels + 2 * taps, channels, taps)
        self.dcn = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2)

    def offsets(self, neighbour: Tensor, target: Tensor) -> Tensor:
        pair = torch.cat([neighbour, target], dim=1)
        coarse = up2(self.coarse(down2(pair))) * 2
        fine = coarse + self.fine(torch.cat([pair, coarse], dim=1))
        return fine.clamp(-self.max_disp, self.max_disp)

    def forward(self, feats: Tensor, target_index: int | None = None) -> AlignedStack:
        b, t, c, h, w = feats.shape
        ti = t // 2 if target_index is None else target_index
        nbr = feats.flatten(0, 1)
        tgt = feats[:, ti:ti + 1].expand(b, t, c, h, w).flatten(0, 1)
        off = self.offsets(nbr, tgt)
        keep = torch.ones(t, dtype=feats.dtype)
        keep[ti] = 0
        off = off * keep.repeat(b).view(-1, 1, 1, 1)
        out = deformable_conv(nbr, off, self.dcn.weight, self.dcn.bias, self.max_disp)
        return AlignedStack(out.reshape(b, t, c, h, w))
