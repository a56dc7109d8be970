"""Hybrid attention reconstruction: stacked long-short attention blocks + pixel shuffle."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .common import ResBlock, conv3x3, zero_

RECON_MODES = ("hybrid", "resblock", "laOnly", "saOnly")


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation style per-channel gate."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < reduction:
            raise ValueError(f"channel attention needs channels >= reduction, got {channels} < {reduction}")
        hidden = channels // reduction
        self.squeeze = nn.Conv2d(channels, hidden, 1)
        self.excite = nn.Conv2d(hidden, channels, 1)

    def scale(self, x: Tensor) -> Tensor:
        s = x.mean(dim=(-2, -1), keepdim=True)
        return torch.sigmoid(self.excite(F.relu(self.squeeze(s))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.scale(x)


def window_partition(x: Tensor, ws: int) -> Tensor:
    """(B, C, H, W) -> (B * nWindows, ws*ws, C)."""
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // ws, ws, w // ws, ws)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)


def window_merge(tokens: Tensor, ws: int, b: int, h: int, w: int) -> Tensor:
    c = tokens.shape[-1]
    x = tokens.reshape(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


class WindowMSA(nn.Module):
    """Multi-head self-attention inside non-overlapping square windows (no shift,
    no positional bias)."""

    def __init__(self, channels: int, heads: int = 4, window_size: int = 8):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels ({channels}) must be divisible by heads ({heads})")
        self.heads, self.window_size = heads, window_size
        self.head_dim = channels // heads
        # No key bias: it shifts every logit in a row equally and never trains.
        self.qkv = nn.Linear(channels, 3 * channels, bias=False)
        self.q_bias = nn.Parameter(torch.zeros(channels))
        self.v_bias = nn.Parameter(torch.zeros(channels))
        self.proj = nn.Linear(channels, channels)

    def _tokens(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        ws = self.window_size
        if h % ws or w % ws:
            raise ValueError(f"spatial size {h}x{w} is not divisible by window size {ws}")
        return window_partition(x, ws)

    def _qkv(self, tokens: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        nw, n, c = tokens.shape
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        qkv = F.linear(tokens, self.qkv.weight, bias).reshape(nw, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def attention_weights(self, x: Tensor) -> Tensor:
        """Softmax weights, shape (nWindows*B, heads, n, n)."""
        q, k, _ = self._qkv(self._tokens(x))
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = self._tokens(x)
        q, k, v = self._qkv(tokens)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(tokens.shape)
        return window_merge(self.proj(out), self.window_size, b, h, w)


class LSAB(nn.Module):
    """Long-short attention block: y = x + MSA(LN(x)); out = y + CA(conv(y)).

    ``variant`` keeps only the long ('la') or short ('sa') half for ablations.
    Both branch tails start at zero, so a fresh block is the identity.
    """

    def __init__(self, channels: int, heads: int = 4, window_size: int = 8, ca_reduction: int = 16,
                 variant: str = "hybrid"):
        super().__init__()
        if variant not in ("hybrid", "la", "sa"):
            raise ValueError(f"unknown LSAB variant {variant!r}")
        self.norm = self.msa = self.conv = self.ca = None
        if variant in ("hybrid", "la"):
            self.norm = nn.LayerNorm(channels)
            self.msa = WindowMSA(channels, heads, window_size)
            zero_(self.msa.proj)
        if variant in ("hybrid", "sa"):
            self.conv = zero_(conv3x3(channels, channels))
            self.ca = ChannelAttention(channels, ca_reduction)

    def long_branch(self, x: Tensor) -> Tensor:
        normed = self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        return self.msa(normed)

    def short_branch(self, y: Tensor) -> Tensor:
        return self.ca(self.conv(y))

    def forward(self, x: Tensor) -> Tensor:
        y = x + self.long_branch(x) if self.msa is not None else x
        return y + self.short_branch(y) if self.ca is not None else y


class Upsampler(nn.Sequential):
    """Cascaded conv -> x2 pixel shuffle -> LeakyReLU stages, then a conv to RGB."""

    def __init__(self, channels: int, scale: int):
        if scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {scale}")
        layers: list[nn.Module] = []
        for _ in range(int(math.log2(scale))):
            layers += [conv3x3(channels, 4 * channels), nn.PixelShuffle(2), nn.LeakyReLU(0.1)]
        layers.append(conv3x3(channels, 3))
        super().__init__(*layers)


class Reconstruction(nn.Module):
    def __init__(self, channels: int, scale: int = 4, num_blocks: int = 5, heads: int = 4,
                 window_size: int = 8, ca_reduction: int = 16, mode: str = "hybrid"):
        super().__init__()
        if mode not in RECON_MODES:
            raise ValueError(f"reconstruction mode must be one of {RECON_MODES}, got {mode!r}")
        self.scale, self.window_size = scale, window_size
        if mode == "resblock":
            blocks = [ResBlock(channels, zero_tail=True) for _ in range(num_blocks)]
        else:
            variant = {"hybrid": "hybrid", "laOnly": "la", "saOnly": "sa"}[mode]
            blocks = [LSAB(channels, heads, window_size, ca_reduction, variant) for _ in range(num_blocks)]
        self.blocks = nn.Sequential(*blocks)
        self.upsample = Upsampler(channels, scale)

    def forward(self, feat: Tensor, base: Tensor | None = None, clamp: bool = True) -> Tensor:
        out = self.upsample(self.blocks(feat))
        if base is not None:
            out = out + base
        return out.clamp(0.0, 1.0) if clamp else out


def reconstruct(feat: Tensor, module: Reconstruction, clamp: bool = True) -> Tensor:
    return module(feat, clamp=clamp)
