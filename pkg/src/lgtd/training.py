"""L1 training loop with step-halving learning rate, and a finite-difference gradient oracle."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .data import PairedClipSource, PairedSample
from .metrics import EvalProtocol, frame_scores
from .model import ConfigError, ModelConfig, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "epoch", "lr", "loss", "valPSNR", "valSSIM", "wallclock"]


@dataclass
class TrainConfig:
    batch_size: int = 4
    patch_size: int = 64
    lr_init: float = 1e-4
    halve_every: int = 10
    epochs: int = 50
    iters_per_epoch: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 1  # epochs; 0 disables intermediate checkpoints

    def validate(self) -> "TrainConfig":
        for name in ("batch_size", "patch_size", "lr_init", "halve_every", "epochs", "iters_per_epoch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"train.{name}: must be positive, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must lie in [0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train fields: {sorted('train.' + k for k in unknown)}")
        return cls(**d)


def l1_loss(sr: Tensor, gt: Tensor) -> Tensor:
    """Mean absolute error."""
    if sr.shape != gt.shape:
        raise ValueError(f"l1_loss: shape mismatch {tuple(sr.shape)} vs {tuple(gt.shape)}")
    return (sr - gt).abs().mean()


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr_init * 0.5 ** (epoch // cfg.halve_every)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainHistory:
    rows: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.rows]

    def epoch_rows(self) -> list[dict]:
        return [r for r in self.rows if r["valPSNR"] != ""]


def collate(samples: Sequence[PairedSample]) -> tuple[Tensor, Tensor]:
    lr = torch.stack([s.lr.frames for s in samples])
    hr = torch.stack([s.hr for s in samples])
    return lr, hr


@torch.no_grad()
def validate_samples(model: nn.Module, samples: Sequence[PairedSample],
                     protocol: EvalProtocol | None = None) -> tuple[float, float]:
    was_training = model.training
    model.eval()
    scores = []
    for s in samples:
        sr = model(s.lr.frames.unsqueeze(0))[0]
        scores.append(frame_scores(s.hr, sr, protocol))
    model.train(was_training)
    return float(np.mean([p for p, _ in scores])), float(np.mean([q for _, q in scores]))


def _grad_norms(model: nn.Module) -> dict[str, float]:
    return {k: float(p.grad.norm()) for k, p in model.named_parameters() if p.grad is not None}


def train(model: nn.Module, source: PairedClipSource, cfg: TrainConfig,
          val: Sequence[PairedSample] = (), out_dir: str | Path | None = None,
          model_cfg: ModelConfig | None = None, protocol: EvalProtocol | None = None,
          max_iters: int | None = None) -> TrainHistory:
    """Adam on the L1 loss over randomly drawn, augmented patch batches.

    Each epoch ends with a learning-rate update, a validation pass over
    ``val`` and (if ``out_dir`` is given) a checkpoint. Every iteration is
    logged to ``out_dir/train_log.csv``.
    """
    cfg.validate()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=(cfg.adam_beta1, cfg.adam_beta2))
    history = TrainHistory()
    log_fh = (out / "train_log.csv").open("w", newline="") if out is not None else None
    writer = csv.DictWriter(log_fh, LOG_COLUMNS) if log_fh else None
    if writer:
        writer.writeheader()
    model.train()
    start = time.perf_counter()
    total = cfg.epochs * cfg.iters_per_epoch if max_iters is None else max_iters
    it = written = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            for _ in range(cfg.iters_per_epoch):
                if it >= total:
                    break
                drawn = [source.draw(rng, cfg.patch_size, cfg.augment) for _ in range(cfg.batch_size)]
                lr_batch, hr_batch = collate([s for _, s in drawn])
                opt.zero_grad(set_to_none=True)
                loss = l1_loss(model(lr_batch), hr_batch)
                loss.backward()
                if not math.isfinite(loss.item()):
                    diag = {"iter": it, "epoch": epoch, "lr": lr, "loss": repr(loss.item()),
                            "batch_indices": [i for i, _ in drawn], "grad_norms": _grad_norms(model)}
                    if out is not None:
                        (out / "divergence.json").write_text(json.dumps(diag, indent=2))
                    raise TrainingDiverged(f"non-finite loss at iteration {it} (lr={lr})", diag)
                opt.step()
                it += 1
                row = {"iter": it, "epoch": epoch, "lr": lr, "loss": loss.item(), "valPSNR": "",
                       "valSSIM": "", "wallclock": round(time.perf_counter() - start, 3)}
                history.rows.append(row)
            if history.rows and val:
                vp, vs = validate_samples(model, val, protocol)
                history.rows[-1]["valPSNR"], history.rows[-1]["valSSIM"] = vp, vs
                log.info("epoch %d  lr %.3g  loss %.5f  val PSNR %.3f  SSIM %.4f",
                         epoch, lr, history.rows[-1]["loss"], vp, vs)
            if writer:
                writer.writerows(history.rows[written:])
                written = len(history.rows)
                log_fh.flush()
            last = it >= total or epoch == cfg.epochs - 1
            if out is not None and model_cfg is not None and (
                    last or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0)):
                path = save_checkpoint(out / f"checkpoint_epoch{epoch + 1:03d}.safetensors", model, model_cfg,
                                       opt, epoch + 1, rng, {"train": asdict(cfg), "iter": it})
                history.checkpoints.append(path)
            if it >= total:
                break
    finally:
        if log_fh:
            log_fh.close()
    return history


# --------------------------------------------------------------------------
# Finite-difference gradient oracle


def grad_check(op: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               params: Iterable[Tensor] = (), max_coords: int = 64, seed: int = 0,
               details: bool = False):
    """Max relative error between autograd and central differences.

    The output of ``op(*inputs)`` is contracted with a fixed random tensor to
    get a scalar. For every input with ``requires_grad`` and every tensor in
    ``params``, up to ``max_coords`` coordinates are probed with
    ``(f(x + eps) - f(x - eps)) / (2 eps)``. The error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. Run in float64.
    """
    targets = [t for t in inputs if t.requires_grad] + list(params)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        probe = op(*inputs)
    weight = torch.randn(probe.shape, generator=gen, dtype=probe.dtype)

    def scalar() -> Tensor:
        return (op(*inputs) * weight).sum()

    analytic = torch.autograd.grad(scalar(), targets, allow_unused=True)
    worst, per_tensor = 0.0, []
    for t, a in zip(targets, analytic):
        a = torch.zeros_like(t) if a is None else a
        flat, aflat = t.data.view(-1), a.reshape(-1)
        k = min(flat.numel(), max_coords)
        coords = torch.randperm(flat.numel(), generator=gen)[:k]
        err = 0.0
        with torch.no_grad():
            for i in coords.tolist():
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = scalar().item()
                flat[i] = orig - eps
                fm = scalar().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                an = aflat[i].item()
                err = max(err, abs(an - num) / max(abs(an), abs(num), 1e-8))
        per_tensor.append(err)
        worst = max(worst, err)
    return (worst, per_tensor) if details else worst
