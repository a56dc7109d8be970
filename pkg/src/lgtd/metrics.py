"""Y-channel PSNR/SSIM with border cropping, temporal profiles and scene evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .data import Clip, degrade

PSNR_INF = math.inf  # identical inputs; written as "inf" in CSV output


@dataclass
class EvalProtocol:
    channel: str = "Y"  # "Y" or "RGB"
    border_crop: int = 8
    pixel_scale: float = 255.0

    def validate(self) -> "EvalProtocol":
        if self.channel not in ("Y", "RGB"):
            raise ValueError(f"eval.channel: must be 'Y' or 'RGB', got {self.channel!r}")
        if self.border_crop < 0:
            raise ValueError(f"eval.border_crop: must be >= 0, got {self.border_crop}")
        return self


def rgb_to_y(frame):
    """BT.601 limited-range luma of a [0, 1] RGB frame ``(..., 3, H, W)``.

    Output stays on the [0, 1] scale, spanning [16/255, 235/255].
    """
    r, g, b = frame[..., 0, :, :], frame[..., 1, :, :], frame[..., 2, :, :]
    return (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0


def _as_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def crop_border(x: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return x
    out = x[..., border:-border, border:-border]
    if out.shape[-1] <= 0 or out.shape[-2] <= 0 or out.size == 0:
        raise ValueError(f"cropping {border} px leaves no area of a {x.shape[-2]}x{x.shape[-1]} image")
    return out


def psnr(gt, sr, border: int = 8, data_range: float = 255.0) -> float:
    """PSNR in dB of images on the ``[0, data_range]`` scale; ``inf`` if identical."""
    a, b = _as_numpy(gt), _as_numpy(sr)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    a, b = crop_border(a, border), crop_border(b, border)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    pad = (len(win) - 1) // 2
    out = correlate1d(correlate1d(img, win, axis=-1, mode="constant"), win, axis=-2, mode="constant")
    return out[..., pad:img.shape[-2] - pad, pad:img.shape[-1] - pad]


def _ssim_2d(a: np.ndarray, b: np.ndarray, data_range: float, win: np.ndarray) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(gt, sr, border: int = 8, data_range: float = 255.0, window: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-window SSIM (Wang et al. 2004 constants) averaged over valid windows.

    3-D inputs ``(C, H, W)`` are scored per channel and averaged.
    """
    a, b = _as_numpy(gt), _as_numpy(sr)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    a, b = crop_border(a, border), crop_border(b, border)
    if min(a.shape[-2:]) < window:
        raise ValueError(f"image {a.shape[-2]}x{a.shape[-1]} is smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    if a.ndim == 2:
        return _ssim_2d(a, b, data_range, win)
    return float(np.mean([_ssim_2d(x, y, data_range, win) for x, y in zip(a.reshape(-1, *a.shape[-2:]),
                                                                          b.reshape(-1, *b.shape[-2:]))]))


def frame_scores(gt: torch.Tensor, sr: torch.Tensor, protocol: EvalProtocol | None = None) -> tuple[float, float]:
    """(PSNR, SSIM) of two [0, 1] RGB frames under ``protocol``."""
    p = (protocol or EvalProtocol()).validate()
    if p.channel == "Y":
        a, b = rgb_to_y(_as_numpy(gt)), rgb_to_y(_as_numpy(sr))
    else:
        a, b = _as_numpy(gt), _as_numpy(sr)
    a, b = a * p.pixel_scale, b * p.pixel_scale
    return psnr(a, b, p.border_crop, p.pixel_scale), ssim(a, b, p.border_crop, p.pixel_scale)


def temporal_profile(frames, row: int):
    """Stack pixel row ``row`` of every frame: ``(T, [C,] H, W)`` -> ``([C,] T, W)``."""
    height = frames.shape[-2]
    if not 0 <= row < height:
        raise ValueError(f"row {row} outside [0, {height})")
    lines = frames[..., row, :]  # (T, [C,] W)
    if lines.ndim == 3:
        return lines.permute(1, 0, 2) if torch.is_tensor(lines) else np.transpose(lines, (1, 0, 2))
    return lines


def window_indices(center: int, n: int, length: int) -> list[int]:
    """Indices of the 2N+1 window around ``center``, replicating the end frames."""
    return [min(max(center + i, 0), length - 1) for i in range(-n, n + 1)]


@dataclass
class SceneResult:
    scene: str
    frames: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([p for _, p, _ in self.frames]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s for _, _, s in self.frames]))


@torch.no_grad()
def evaluate_scene(model: torch.nn.Module, hr: Clip, n: int, scale: int,
                   protocol: EvalProtocol | None = None, lr: Clip | None = None) -> SceneResult:
    """Super-resolve every frame of ``hr``'s bicubic LR version and score it."""
    length = len(hr)
    if length < 2 * n + 1:
        raise ValueError(f"scene {hr.scene_id!r} has {length} frames, fewer than T={2 * n + 1}")
    lr = lr if lr is not None else degrade(hr, scale)
    dtype = next(iter(model.parameters()), torch.empty(0)).dtype
    result = SceneResult(hr.scene_id)
    for k in range(length):
        window = lr.frames[window_indices(k, n, length)].unsqueeze(0).to(dtype)
        sr = model(window)[0]
        result.frames.append((k, *frame_scores(hr.frames[k], sr, protocol)))
    return result


def bicubic_scene_scores(hr: Clip, scale: int, protocol: EvalProtocol | None = None) -> SceneResult:
    """Reference scores of plain bicubic upsampling, computed without any model."""
    from .data import bicubic_upsample

    lr = degrade(hr, scale)
    result = SceneResult(hr.scene_id)
    for k in range(len(hr)):
        up = bicubic_upsample(lr.frames[k], scale).clamp(0, 1)
        result.frames.append((k, *frame_scores(hr.frames[k], up, protocol)))
    return result


def write_results(results: Sequence[SceneResult], out_dir: Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_frame, summary = out_dir / "results.csv", out_dir / "summary.csv"
    with per_frame.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "frameIdx", "psnrY", "ssimY"])
        for res in results:
            for k, p, s in res.frames:
                w.writerow([res.scene, k, repr(p), repr(s)])
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "frames", "psnrY", "ssimY"])
        for res in results:
            w.writerow([res.scene, len(res.frames), repr(res.mean_psnr), repr(res.mean_ssim)])
        allp = [p for r in results for _, p, _ in r.frames]
        alls = [s for r in results for _, _, s in r.frames]
        w.writerow(["overall", len(allp), repr(float(np.mean(allp))), repr(float(np.mean(alls)))])
    return per_frame, summary
