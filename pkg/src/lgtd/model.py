"""LGTD network assembly, analytic statistics and checkpoint persistence."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
from safetensors.torch import load_file, save_file
from torch import Tensor, nn

from .align import CoarseAligner, FeatureExtractor
from .common import conv3x3
from .data import bicubic_upsample
from .dcu import DCU, DirectFusion
from .ltdm import LTDM
from .reconstruction import RECON_MODES, Reconstruction
from .stdm import STDM

CHECKPOINT_FORMAT = "lgtd-checkpoint-v1"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "lgtd"  # "lgtd" or "bicubic" (parameter-free baseline)
    n: int = 2  # clip half-width, T = 2N+1
    channels: int = 64
    scale: int = 4
    extract_blocks: int = 5
    lsab_blocks: int = 5
    msa_heads: int = 4
    window_size: int = 8
    ca_reduction: int = 16
    alpha: float = 0.5
    beta: float = 0.5
    max_disp: float = 16.0
    use_stdm: bool = True
    use_ltdm: bool = True
    use_dcu: bool = True
    stdm_mode: str = "diff"
    ltdm_mode: str = "diff"
    ltdm_direction: str = "both"
    recon_mode: str = "hybrid"
    upsample_skip: bool = True

    @property
    def frames(self) -> int:
        return 2 * self.n + 1

    @property
    def divisor(self) -> int:
        """LR height and width must be multiples of this."""
        return math.lcm(2, self.window_size) if self.recon_mode in ("hybrid", "laOnly") else 2

    def validate(self) -> "ModelConfig":
        def bad(name, why):
            raise ConfigError(f"model.{name}: {why}")

        if self.arch not in ("lgtd", "bicubic"):
            bad("arch", f"must be 'lgtd' or 'bicubic', got {self.arch!r}")
        if self.scale not in (2, 4):
            bad("scale", f"must be 2 or 4, got {self.scale}")
        if self.arch == "bicubic":
            return self
        for name in ("n", "channels", "lsab_blocks", "msa_heads", "window_size", "ca_reduction"):
            if getattr(self, name) < 1:
                bad(name, f"must be >= 1, got {getattr(self, name)}")
        if self.extract_blocks < 0:
            bad("extract_blocks", "must be >= 0")
        if self.alpha < 0 or self.beta < 0:
            bad("alpha" if self.alpha < 0 else "beta", "balance coefficients must be >= 0")
        if self.stdm_mode not in ("diff", "concat"):
            bad("stdm_mode", f"must be 'diff' or 'concat', got {self.stdm_mode!r}")
        if self.ltdm_mode not in ("diff", "concat"):
            bad("ltdm_mode", f"must be 'diff' or 'concat', got {self.ltdm_mode!r}")
        if self.ltdm_direction not in ("both", "forward", "backward"):
            bad("ltdm_direction", f"must be both/forward/backward, got {self.ltdm_direction!r}")
        if self.recon_mode not in RECON_MODES:
            bad("recon_mode", f"must be one of {RECON_MODES}, got {self.recon_mode!r}")
        if not (self.use_stdm or self.use_ltdm):
            bad("use_ltdm", "at least one of use_stdm / use_ltdm must be enabled")
        if not self.use_stdm and self.stdm_mode != "diff":
            bad("stdm_mode", "set while use_stdm is off")
        if not self.use_ltdm and (self.ltdm_mode != "diff" or self.ltdm_direction != "both"):
            bad("ltdm_mode" if self.ltdm_mode != "diff" else "ltdm_direction", "set while use_ltdm is off")
        if self.ltdm_mode == "concat" and self.ltdm_direction != "both":
            bad("ltdm_direction", "concat fusion is only defined for both directions")
        if self.recon_mode in ("hybrid", "laOnly") and self.channels % self.msa_heads:
            bad("msa_heads", f"channels {self.channels} not divisible by {self.msa_heads} heads")
        if self.recon_mode in ("hybrid", "saOnly") and self.channels < self.ca_reduction:
            bad("ca_reduction", f"exceeds channels ({self.ca_reduction} > {self.channels})")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model fields: {sorted('model.' + k for k in unknown)}")
        return cls(**d)


class LGTD(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.channels
        self.guide_conv = conv3x3(3, c)  # F_t for the compensation chain
        fusion = DCU if cfg.use_dcu else DirectFusion
        if cfg.use_stdm:
            self.target_conv = conv3x3(3, c)  # f_t for the short-term module
            self.stdm = STDM(c, cfg.n, cfg.stdm_mode)
            self.fuse_short = fusion(c)
        if cfg.use_ltdm:
            self.extractor = FeatureExtractor(c, cfg.extract_blocks)
            self.aligner = CoarseAligner(c, max_disp=cfg.max_disp)
            self.ltdm = LTDM(c, cfg.frames, cfg.ltdm_mode, cfg.ltdm_direction, cfg.alpha, cfg.beta)
            self.fuse_long = fusion(c)
        self.recon = Reconstruction(c, cfg.scale, cfg.lsab_blocks, cfg.msa_heads, cfg.window_size,
                                    cfg.ca_reduction, cfg.recon_mode)

    def check_input(self, frames: Tensor) -> Tensor:
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        if frames.dim() != 5 or frames.shape[2] != 3:
            raise ValueError(f"expected (B, T, 3, H, W) frames, got {tuple(frames.shape)}")
        t, h, w = frames.shape[1], frames.shape[-2], frames.shape[-1]
        if t != self.cfg.frames:
            raise ValueError(f"clip length {t} does not match 2N+1 = {self.cfg.frames}")
        d = self.cfg.divisor
        if h % d or w % d:
            raise ValueError(f"LR size {h}x{w} must be divisible by {d}")
        return frames

    def forward(self, frames: Tensor, trace: dict | None = None, clamp: bool = True) -> Tensor:
        frames = self.check_input(frames)
        center = frames[:, self.cfg.n]
        f_guide = self.guide_conv(center)
        f_s = f_guide
        if self.cfg.use_stdm:
            g_s = self.stdm(frames, self.target_conv(center))
            f_s = self.fuse_short(f_guide, g_s)
        f_hat = f_s
        if self.cfg.use_ltdm:
            stack = self.aligner(self.extractor(frames))
            f_l = self.ltdm(stack)
            f_hat = self.fuse_long(f_s, f_l)
        base = bicubic_upsample(center, self.cfg.scale) if self.cfg.upsample_skip else None
        out = self.recon(f_hat, base, clamp)
        if trace is not None:
            trace["F_t"] = tuple(f_guide.shape)
            if self.cfg.use_stdm:
                trace["g_s"] = tuple(g_s.shape)
            trace["F_s"] = tuple(f_s.shape)
            if self.cfg.use_ltdm:
                trace["F_T"] = tuple(stack.forward.shape)
                trace["F_l"] = tuple(f_l.shape)
            trace["F_hat"] = tuple(f_hat.shape)
            trace["I_SR"] = tuple(out.shape)
        return out


class BicubicBaseline(nn.Module):
    """Parameter-free reference: bicubic upsampling of the centre frame."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg

    def forward(self, frames: Tensor, trace: dict | None = None) -> Tensor:
        if frames.dim() == 4:
            frames = frames.unsqueeze(0)
        center = frames[:, frames.shape[1] // 2]
        return bicubic_upsample(center, self.cfg.scale).clamp(0.0, 1.0)


def build_model(cfg: ModelConfig) -> nn.Module:
    cfg.validate()
    return BicubicBaseline(cfg) if cfg.arch == "bicubic" else LGTD(cfg)


# --------------------------------------------------------------------------
# Analytic statistics


class Layer(NamedTuple):
    name: str
    kind: str  # conv | linear | matmul (linear without bias) | bias | norm | attention
    cin: int
    cout: int
    k: int
    h: int  # spatial size (or tokens for linear: h*w)
    w: int
    uses: int = 1  # applications per forward; parameters are counted once

    @property
    def params(self) -> int:
        if self.kind == "conv":
            return self.cin * self.cout * self.k * self.k + self.cout
        if self.kind == "linear":
            return self.cin * self.cout + self.cout
        if self.kind == "matmul":
            return self.cin * self.cout
        if self.kind == "bias":
            return self.cin
        if self.kind == "norm":
            return 2 * self.cin
        return 0

    @property
    def flops(self) -> int:
        hw = self.h * self.w
        if self.kind == "conv":
            return 2 * self.cin * self.cout * self.k * self.k * hw * self.uses
        if self.kind in ("linear", "matmul"):
            return 2 * self.cin * self.cout * hw * self.uses
        if self.kind == "attention":
            # QK^T and AV: each 2 * n * d multiply-adds per token, summed over heads.
            return 2 * 2 * hw * self.k * self.cin * self.uses
        return 0


def layer_specs(cfg: ModelConfig, h: int, w: int) -> Iterator[Layer]:
    cfg.validate()
    if cfg.arch == "bicubic":
        return
    c, t, n = cfg.channels, cfg.frames, cfg.n
    h2, w2 = h // 2, w // 2

    def conv(name, cin, cout, k=3, hh=h, ww=w, uses=1):
        return Layer(name, "conv", cin, cout, k, hh, ww, uses)

    def fusion(prefix):
        if cfg.use_dcu:
            yield conv(f"{prefix}.branch.conv1", c, c)
            yield conv(f"{prefix}.branch.conv2", c, c)
        else:
            yield conv(f"{prefix}.fuse", 2 * c, c)

    yield conv("guide_conv", 3, c)
    if cfg.use_stdm:
        yield conv("target_conv", 3, c)
        yield conv("stdm.encoder.conv", 3 if cfg.stdm_mode == "diff" else 6, c, uses=2 * n)
        yield conv("stdm.encoder.fusion", 2 * n * c, c, hh=h2, ww=w2)
        for i in (1, 2):
            yield conv(f"stdm.res1.body.conv{i}", c, c)
        for i in (1, 2):
            yield conv(f"stdm.res2.body.conv{i}", c, c, hh=h2, ww=w2)
        yield from fusion("fuse_short")
    if cfg.use_ltdm:
        taps = 9
        yield conv("extractor.head", 3, c, uses=t)
        for b in range(cfg.extract_blocks):
            for i in (1, 2):
                yield conv(f"extractor.blocks.{b}.body.conv{i}", c, c, uses=t)
        yield conv("aligner.coarse.conv1", 2 * c, c, hh=h2, ww=w2, uses=t)
        yield conv("aligner.coarse.conv2", c, 2 * taps, hh=h2, ww=w2, uses=t)
        yield conv("aligner.fine.conv1", 2 * c + 2 * taps, c, uses=t)
        yield conv("aligner.fine.conv2", c, 2 * taps, uses=t)
        yield conv("aligner.dcn", c, c, uses=t)
        yield conv("ltdm.squeeze", t * c, c, k=1, uses=2)
        yield conv("ltdm.blend", c, c, uses=2)
        if cfg.ltdm_mode == "concat":
            yield conv("ltdm.fuse", 2 * c, c)
        branches = {"both": ("act_f", "act_b"), "forward": ("act_f",), "backward": ("act_b",)}
        for br in branches[cfg.ltdm_direction]:
            yield conv(f"ltdm.{br}.same_scale", c, c)
            yield conv(f"ltdm.{br}.small_scale", c, c, hh=h2, ww=w2)
            yield conv(f"ltdm.{br}.out", c, c)
        yield from fusion("fuse_long")
    for b in range(cfg.lsab_blocks):
        p = f"recon.blocks.{b}"
        if cfg.recon_mode == "resblock":
            yield conv(f"{p}.body.conv1", c, c)
            yield conv(f"{p}.body.conv2", c, c)
            continue
        if cfg.recon_mode in ("hybrid", "laOnly"):
            yield Layer(f"{p}.norm", "norm", c, c, 0, h, w)
            yield Layer(f"{p}.msa.qkv", "matmul", c, 3 * c, 0, h, w)
            yield Layer(f"{p}.msa.qv_bias", "bias", 2 * c, 0, 0, h, w)
            yield Layer(f"{p}.msa.attention", "attention", c, c, cfg.window_size ** 2, h, w)
            yield Layer(f"{p}.msa.proj", "linear", c, c, 0, h, w)
        if cfg.recon_mode in ("hybrid", "saOnly"):
            hidden = c // cfg.ca_reduction
            yield conv(f"{p}.conv", c, c)
            yield conv(f"{p}.ca.squeeze", c, hidden, k=1, hh=1, ww=1)
            yield conv(f"{p}.ca.excite", hidden, c, k=1, hh=1, ww=1)
    hs, ws = h, w
    stages = int(math.log2(cfg.scale))
    for s in range(stages):  # each stage is conv, shuffle, activation
        yield conv(f"recon.upsample.{3 * s}", c, 4 * c, hh=hs, ww=ws)
        hs, ws = 2 * hs, 2 * ws
    yield conv(f"recon.upsample.{3 * stages}", c, 3, hh=hs, ww=ws)


def param_count(cfg: ModelConfig) -> int:
    return sum(layer.params for layer in layer_specs(cfg, 8, 8))


def flops_estimate(cfg: ModelConfig, h: int, w: int) -> float:
    """Forward FLOPs (2 x multiply-accumulates) for one ``h`` x ``w`` LR clip.

    Counts convolutions, linear projections and attention products;
    elementwise ops, pooling, sampling and shuffles are ignored.
    """
    return float(sum(layer.flops for layer in layer_specs(cfg, h, w)))


# --------------------------------------------------------------------------
# Checkpoints (safetensors container: little-endian tensors + JSON metadata)


@dataclass
class Checkpoint:
    config: ModelConfig
    state: dict[str, Tensor]
    epoch: int = 0
    optimizer: dict | None = None  # torch optimizer state_dict
    rng: dict | None = None  # {"torch": ByteTensor, "numpy": bit-generator state}
    extra: dict | None = None

    def model(self) -> nn.Module:
        m = build_model(self.config)
        m.load_state_dict(self.state)
        return m


def _np_state_to_json(state: dict) -> str:
    return json.dumps(state, default=int)


def save_checkpoint(path: str | Path, model: nn.Module, cfg: ModelConfig, optimizer=None, epoch: int = 0,
                    np_rng: np.random.Generator | None = None, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v.detach().contiguous().clone() for k, v in model.state_dict().items()}
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": json.dumps(cfg.to_dict()),
        "epoch": str(epoch),
        "extra": json.dumps(extra or {}),
    }
    tensors["rng.torch"] = torch.get_rng_state().clone()
    if np_rng is not None:
        meta["rng.numpy"] = _np_state_to_json(np_rng.bit_generator.state)
    if optimizer is not None:
        sd = optimizer.state_dict()
        names = [k for k, _ in model.named_parameters()]
        for idx, st in sd["state"].items():
            for key, val in st.items():
                val = val if torch.is_tensor(val) else torch.tensor(val)
                tensors[f"optim.{names[idx]}.{key}"] = val.detach().contiguous().clone()
        meta["optim.groups"] = json.dumps([{k: v for k, v in g.items() if k != "params"}
                                           for g in sd["param_groups"]])
    save_file(tensors, str(path), metadata=meta)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an LGTD checkpoint (format={meta.get('format')!r})")
    tensors = load_file(str(path))
    cfg = ModelConfig.from_dict(json.loads(meta["config"])).validate()
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    rng = {"torch": tensors["rng.torch"]}
    if "rng.numpy" in meta:
        rng["numpy"] = json.loads(meta["rng.numpy"])
    optim = None
    if "optim.groups" in meta:
        param_names = [k for k, _ in build_model(cfg).named_parameters()]
        st: dict[int, dict] = {}
        for key, val in tensors.items():
            if not key.startswith("optim."):
                continue
            pname, field = key[len("optim."):].rsplit(".", 1)
            st.setdefault(param_names.index(pname), {})[field] = val
        groups = json.loads(meta["optim.groups"])
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        groups[0]["params"] = list(range(len(param_names)))
        optim = {"state": st, "param_groups": groups}
    return Checkpoint(cfg, state, int(meta.get("epoch", 0)), optim, rng, json.loads(meta.get("extra", "{}")))


def restore_rng(ckpt: Checkpoint) -> np.random.Generator | None:
    """Reinstate the torch RNG and return a numpy generator in the saved state."""
    if not ckpt.rng:
        return None
    torch.set_rng_state(ckpt.rng["torch"])
    if "numpy" not in ckpt.rng:
        return None
    gen = np.random.default_rng()
    gen.bit_generator.state = ckpt.rng["numpy"]
    return gen
