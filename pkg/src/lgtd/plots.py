"""Static figures written by the command-line tools."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def loss_curve(rows: Sequence[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r["iter"] for r in rows], [r["loss"] for r in rows], lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("L1 loss")
    val = [r for r in rows if r["valPSNR"] != ""]
    if val:
        ax2 = ax.twinx()
        ax2.plot([r["iter"] for r in val], [r["valPSNR"] for r in val], "o-", color="tab:red", ms=3)
        ax2.set_ylabel("val PSNR-Y (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablation_bars(rows: Sequence[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(8, 3.5))
    names = [r["model"] for r in rows]
    ax.bar(names, [r["valPSNR"] for r in rows])
    ax.set_ylabel("val PSNR-Y (dB)")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def psnr_vs_frames(frames: Sequence[int], psnrs: Sequence[float], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(frames, psnrs, "o-")
    ax.set_xlabel("input frames")
    ax.set_ylabel("val PSNR-Y (dB)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
