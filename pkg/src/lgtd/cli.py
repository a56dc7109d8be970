"""``lgtd`` command line: train, eval, infer, synth-data, ablate, stats, profile.

Outputs go to ``--out`` or, when omitted, to ``$LGTD_OUTPUT_ROOT/<command>``
(default root: ``./runs``). Every command exits 0 on success and non-zero
with a one-line diagnostic on any rejection.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import plots
from .ablation import REGISTRY, run_ablation
from .config import RunConfig, load_config
from .data import (Clip, DatasetError, PairedClipSource, SceneParams, load_dataset, load_frame, save_clip,
                   save_frame, synth_scene, write_manifest)
from .metrics import evaluate_scene, temporal_profile, window_indices, write_results
from .model import ConfigError, build_model, flops_estimate, load_checkpoint, param_count, save_checkpoint
from .training import train

PUBLISHED_PARAMS_M = 20.7
PUBLISHED_FLOPS_G = 647.8
OUTPUT_ROOT_ENV = "LGTD_OUTPUT_ROOT"


def output_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_clips(index, split: str | None) -> list[Clip]:
    scenes = index.split(split) if split and index.splits else index.scenes
    return [s.load() for s in scenes]


def load_training_data(data_dir: str, T: int, scale: int):
    """(train source, validation samples) from a dataset directory.

    Uses the manifest's ``train`` / ``test`` splits when present; otherwise
    every scene trains and validation is skipped.
    """
    index = load_dataset(data_dir)
    if not index.scenes:
        raise DatasetError(f"{data_dir}: no usable scenes ({index.rejected or 'empty'})")
    has_splits = "train" in index.splits
    source = PairedClipSource(_scene_clips(index, "train" if has_splits else None), T, scale)
    val = []
    if "test" in index.splits:
        vsrc = PairedClipSource([s.load() for s in index.split("test")], T, scale)
        by_scene: dict[str, list[int]] = {}
        for k, (i, _) in enumerate(vsrc.windows):
            by_scene.setdefault(vsrc.names[i], []).append(k)
        val = [vsrc.sample(ks[len(ks) // 2]) for ks in by_scene.values()]
    return source, val


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    out = output_dir(args, "train")
    cfg.dump(out / "resolved_config.yaml")
    torch.manual_seed(cfg.train.seed)
    model = build_model(cfg.model)
    if cfg.model.arch == "bicubic":
        path = save_checkpoint(out / "checkpoint_final.safetensors", model, cfg.model)
        print(f"baseline checkpoint written to {path}")
        return 0
    if not args.data:
        raise ConfigError("--data is required unless model.arch=bicubic")
    source, val = load_training_data(args.data, cfg.model.frames, cfg.model.scale)
    hist = train(model, source, cfg.train, val, out, cfg.model, cfg.eval, args.max_iters)
    final = save_checkpoint(out / "checkpoint_final.safetensors", model, cfg.model, epoch=cfg.train.epochs)
    if hist.rows:
        plots.loss_curve(hist.rows, out / "loss.png")
    print(f"trained {len(hist.rows)} iterations; final loss {hist.losses[-1]:.5f}; checkpoint {final}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model().eval()
    cfg = load_config(None, [f"eval.border_crop={args.border}", f"eval.channel={args.channel}"])
    out = output_dir(args, "eval")
    RunConfig(ckpt.config, eval=cfg.eval).dump(out / "resolved_config.yaml")
    index = load_dataset(args.data)
    clips = _scene_clips(index, args.split)
    results = [evaluate_scene(model, clip, ckpt.config.n, ckpt.config.scale, cfg.eval) for clip in clips]
    per_frame, summary = write_results(results, out)
    for r in results:
        print(f"{r.scene}: PSNR-Y {r.mean_psnr:.4f} dB  SSIM-Y {r.mean_ssim:.4f}")
    print(f"wrote {per_frame} and {summary}")
    return 0


@torch.no_grad()
def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model().eval()
    clip_dir = Path(args.clip)
    paths = sorted(p for p in clip_dir.glob("*.png"))
    if not paths:
        raise DatasetError(f"{clip_dir}: no .png frames")
    frames = torch.stack([load_frame(p) for p in paths])
    out = output_dir(args, "infer")
    RunConfig(ckpt.config).dump(out / "resolved_config.yaml")
    n = ckpt.config.n
    for k, p in enumerate(paths):
        sr = model(frames[window_indices(k, n, len(paths))].unsqueeze(0))[0]
        save_frame(sr, out / p.name)
    print(f"wrote {len(paths)} SR frames to {out}")
    return 0


def cmd_synth(args) -> int:
    out = output_dir(args, "synth-data")
    params = SceneParams(num_objects=args.objects, max_speed=args.max_speed, texture_scale=args.texture_scale,
                         T=args.frames, H=args.height, W=args.width)
    names = {"train": [], "test": []}
    for i in range(args.count + args.test_count):
        clip = synth_scene(args.seed * 100_003 + i, params)
        name = f"scene_{i:04d}"
        save_clip(clip, out / name)
        names["train" if i < args.count else "test"].append(name)
    write_manifest(out, names)
    print(f"wrote {args.count} train + {args.test_count} test scenes to {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.set)
    out = output_dir(args, "ablate")
    cfg.dump(out / "resolved_config.yaml")
    source, val = load_training_data(args.data, cfg.model.frames, cfg.model.scale)
    rows = run_ablation(cfg.model, cfg.train, args.models, source, val, out, args.iters, cfg.eval)
    if val:
        plots.ablation_bars(rows, out / "ablation.png")
    if args.frame_counts:
        frames, psnrs = [], []
        for t in args.frame_counts:
            if t % 2 == 0:
                raise ConfigError(f"--frame-counts: frame counts must be odd, got {t}")
            base = dataclasses.replace(cfg.model, n=t // 2)
            src_t, val_t = load_training_data(args.data, t, cfg.model.scale)
            row = run_ablation(base, cfg.train, ["Full"], src_t, val_t, None, args.iters, cfg.eval)[0]
            frames.append(t)
            psnrs.append(row["valPSNR"])
        plots.psnr_vs_frames(frames, psnrs, out / "psnr_vs_frames.png")
    for r in rows:
        print(f"{r['model']:>9} [{r['study']:>9}] val PSNR {r['valPSNR']:.3f}  (published {r['ref_psnr']})")
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def stats_report(cfg: RunConfig, size: int) -> dict:
    model = build_model(cfg.model)
    return {
        "input_size": [size, size],
        "frames": cfg.model.frames,
        "params": param_count(cfg.model),
        "params_instantiated": sum(p.numel() for p in model.parameters()),
        "flops_g": flops_estimate(cfg.model, size, size) / 1e9,
        "reference": {"params_m": PUBLISHED_PARAMS_M, "flops_g": PUBLISHED_FLOPS_G, "input_size": [160, 160]},
    }


def cmd_stats(args) -> int:
    cfg = load_config(args.config, args.set)
    report = stats_report(cfg, args.size)
    if args.out or os.environ.get(OUTPUT_ROOT_ENV):
        out = output_dir(args, "stats")
        cfg.dump(out / "resolved_config.yaml")
        (out / "stats.json").write_text(json.dumps(report, indent=2))
    print(f"params      {report['params']:,} ({report['params'] / 1e6:.3f} M)   published: {PUBLISHED_PARAMS_M} M")
    print(f"FLOPs       {report['flops_g']:.2f} G @ {args.size}x{args.size}   published: {PUBLISHED_FLOPS_G} G @ 160x160")
    return 0


def cmd_profile(args) -> int:
    paths = sorted(Path(args.frames).glob("*.png"))
    if not paths:
        raise DatasetError(f"{args.frames}: no .png frames")
    frames = torch.stack([load_frame(p) for p in paths])
    profile = temporal_profile(frames, args.row)
    out = Path(args.out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_frame(profile, out)
    print(f"wrote {profile.shape[-2]}x{profile.shape[-1]} profile to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lgtd", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML/JSON run config (model.*, train.*, eval.*)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value")

    sp = sub.add_parser("train", help="train a model")
    with_config(sp)
    sp.add_argument("--data", help="dataset root (<root>/<scene>/<index>.png)")
    sp.add_argument("--out")
    sp.add_argument("--max-iters", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on a dataset (Y-channel PSNR/SSIM)")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", help="manifest split to evaluate (default: all scenes)")
    sp.add_argument("--border", type=int, default=8)
    sp.add_argument("--channel", choices=["Y", "RGB"], default="Y")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="super-resolve a directory of LR frames")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("synth-data", help="write a synthetic satellite-like dataset")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=32)
    sp.add_argument("--test-count", type=int, default=0)
    sp.add_argument("--frames", type=int, default=7)
    sp.add_argument("--height", type=int, default=128)
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--objects", type=int, default=6)
    sp.add_argument("--max-speed", type=float, default=1.5)
    sp.add_argument("--texture-scale", type=float, default=3.0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("ablate", help="train registry variants and tabulate them")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--models", nargs="+", default=list(REGISTRY), choices=list(REGISTRY))
    sp.add_argument("--iters", type=int, default=100, help="training budget per model")
    sp.add_argument("--frame-counts", type=int, nargs="*", help="also sweep the full model over these T")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("stats", help="parameter count and FLOPs")
    with_config(sp)
    sp.add_argument("--size", type=int, default=160, help="LR input size (square)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("profile", help="temporal profile image of one pixel row")
    sp.add_argument("--frames", required=True)
    sp.add_argument("--row", type=int, required=True)
    sp.add_argument("--out-png", required=True)
    sp.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, DatasetError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
