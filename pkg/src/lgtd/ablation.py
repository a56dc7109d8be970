"""Registry of the ablation variants and a runner that trains them side by side."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .data import PairedClipSource, PairedSample
from .metrics import EvalProtocol
from .model import ModelConfig, build_model, flops_estimate, param_count
from .training import TrainConfig, TrainingDiverged, train, validate_samples


@dataclass(frozen=True)
class Variant:
    name: str
    study: str
    description: str
    changes: dict
    ref_psnr: float  # published reference (Y channel, one test scene); never asserted
    ref_params_m: float
    ref_flops_g: float | None


REGISTRY: dict[str, Variant] = {v.name: v for v in [
    Variant("Full", "all", "S-TDM + L-TDM (diff/diff, both directions), DCU, hybrid attention", {},
            35.38, 20.73, 647.80),
    Variant("Model-1", "modules", "S-TDM only", {"use_ltdm": False}, 35.28, 18.72, 481.02),
    Variant("Model-2", "modules", "L-TDM only", {"use_stdm": False}, 35.34, 19.69, 633.83),
    Variant("Model-3", "fusion", "S-TDM concat, L-TDM diff", {"stdm_mode": "concat"}, 35.33, 20.73, 647.98),
    Variant("Model-4", "fusion", "S-TDM diff, L-TDM concat", {"ltdm_mode": "concat"}, 35.29, 20.79, 651.58),
    Variant("Model-5", "fusion", "S-TDM concat, L-TDM concat", {"stdm_mode": "concat", "ltdm_mode": "concat"},
            35.28, 20.80, 651.75),
    Variant("Model-6", "direction", "forward-only L-TDM", {"ltdm_direction": "forward"}, 35.15, 20.73, 636.23),
    Variant("Model-7", "direction", "backward-only L-TDM", {"ltdm_direction": "backward"}, 35.28, 20.73, 636.23),
    Variant("Model-8", "dcu", "no DCU, direct concat fusion", {"use_dcu": False}, 35.31, 20.47, 641.18),
    Variant("Model-9", "recon", "residual-block reconstruction", {"recon_mode": "resblock"}, 34.83, 6.88, None),
    Variant("Model-10", "recon", "long-term attention (MSA) only", {"recon_mode": "laOnly"}, 35.26, 15.15, None),
    Variant("Model-11", "recon", "short-term attention (CA) only", {"recon_mode": "saOnly"}, 34.72, 13.06, None),
]}


def variant_config(base: ModelConfig, name: str) -> ModelConfig:
    if name not in REGISTRY:
        raise KeyError(f"unknown ablation model {name!r}; choose from {list(REGISTRY)}")
    return dataclasses.replace(base, **REGISTRY[name].changes).validate()


COLUMNS = ["model", "study", "description", "stdm", "ltdm", "stdm_mode", "ltdm_mode", "ltdm_direction",
           "dcu", "recon_mode", "params", "flops_g", "iters", "final_loss", "finite", "valPSNR", "valSSIM",
           "ref_psnr", "ref_params_m", "ref_flops_g"]


def run_ablation(base: ModelConfig, train_cfg: TrainConfig, models: Sequence[str], source: PairedClipSource,
                 val: Sequence[PairedSample], out_dir: str | Path | None = None, iters: int = 100,
                 protocol: EvalProtocol | None = None, flops_size: int = 160) -> list[dict]:
    """Train each named variant for ``iters`` iterations from the same seed and tabulate."""
    rows = []
    for name in models:
        cfg = variant_config(base, name)
        v = REGISTRY[name]
        torch.manual_seed(train_cfg.seed)
        model = build_model(cfg)
        finite, loss = True, math.nan
        try:
            hist = train(model, source, train_cfg, val=(), max_iters=iters)
            loss = hist.losses[-1]
        except TrainingDiverged:
            finite = False
        vp, vs = validate_samples(model, val, protocol) if (finite and val) else (math.nan, math.nan)
        finite = finite and all(torch.isfinite(p).all() for p in model.parameters())
        rows.append({
            "model": name, "study": v.study, "description": v.description,
            "stdm": cfg.use_stdm, "ltdm": cfg.use_ltdm, "stdm_mode": cfg.stdm_mode if cfg.use_stdm else "",
            "ltdm_mode": cfg.ltdm_mode if cfg.use_ltdm else "",
            "ltdm_direction": cfg.ltdm_direction if cfg.use_ltdm else "", "dcu": cfg.use_dcu,
            "recon_mode": cfg.recon_mode, "params": param_count(cfg),
            "flops_g": flops_estimate(cfg, flops_size, flops_size) / 1e9, "iters": iters,
            "final_loss": loss, "finite": finite, "valPSNR": vp, "valSSIM": vs,
            "ref_psnr": v.ref_psnr, "ref_params_m": v.ref_params_m,
            "ref_flops_g": "" if v.ref_flops_g is None else v.ref_flops_g,
        })
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_table(rows: Sequence[dict], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return path
