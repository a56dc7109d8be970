"""Frame sequences: degradation, patching, augmentation, synthesis and disk I/O.

Pixels are float tensors in [0, 1]. A clip is stored as a ``(T, 3, H, W)``
tensor; a single frame as ``(3, H, W)``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter
from torch import Tensor

log = logging.getLogger(__name__)

BICUBIC_A = -0.5
FRAME_PATTERN = re.compile(r"^(\d+)\.png$")


@dataclass
class Clip:
    frames: Tensor  # (T, 3, H, W)
    scene_id: str = ""
    start_index: int = 0

    def __post_init__(self) -> None:
        if self.frames.dim() != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"clip frames must be (T, 3, H, W), got {tuple(self.frames.shape)}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[-2]

    @property
    def width(self) -> int:
        return self.frames.shape[-1]

    @property
    def center(self) -> Tensor:
        return self.frames[len(self) // 2]


@dataclass
class PairedSample:
    lr: Clip
    hr: Tensor  # (3, rH, rW) target for the centre frame
    scale: int
    origin: tuple[int, int] = (0, 0)  # LR (y, x) offset of the last crop

    def __post_init__(self) -> None:
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        h, w = self.lr.height, self.lr.width
        if tuple(self.hr.shape[-2:]) != (h * self.scale, w * self.scale):
            raise ValueError(
                f"HR frame {tuple(self.hr.shape[-2:])} is not {self.scale}x the LR size {(h, w)}"
            )


# --------------------------------------------------------------------------
# Bicubic resampling


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    near = (a + 2) * ax3 - (a + 3) * ax2 + 1
    far = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _resize_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Tap indices and normalised weights, shape (n_out, K).

    Downsampling stretches the kernel by the scale factor (antialiasing).
    Taps falling outside the input are dropped and the rest renormalised.
    Taps are laid out symmetrically around each centre so that mirrored
    outputs are summed in mirrored pairs, which makes resizing commute
    bit-exactly with flips for integer factors.
    """
    ratio = n_in / n_out
    stretch = max(ratio, 1.0)
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) * ratio - 0.5
    lo = np.floor(centers - support).astype(np.int64)
    hi = np.ceil(centers + support).astype(np.int64)
    k = int((hi - lo).max()) + 1
    idx = lo[:, None] + np.arange(k)[None, :]
    w = cubic_kernel((idx - centers[:, None]) / stretch)
    w[(idx < 0) | (idx >= n_in)] = 0.0
    total = np.zeros(n_out)
    for p in range(k // 2):
        total = total + (w[:, p] + w[:, k - 1 - p])
    if k % 2:
        total = total + w[:, k // 2]
    return np.clip(idx, 0, n_in - 1), w / total[:, None]


def _resize_last_axis(x: Tensor, n_out: int) -> Tensor:
    idx, w = _resize_taps(x.shape[-1], n_out)
    k = idx.shape[1]
    gathered = x[..., torch.from_numpy(idx)]  # (..., n_out, K)
    wt = torch.from_numpy(w).to(x.dtype)
    acc = torch.zeros(x.shape[:-1] + (n_out,), dtype=x.dtype)
    for p in range(k // 2):
        q = k - 1 - p
        acc = acc + (gathered[..., p] * wt[:, p] + gathered[..., q] * wt[:, q])
    if k % 2:
        acc = acc + gathered[..., k // 2] * wt[:, k // 2]
    return acc


def bicubic_resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Separable bicubic resize (a = -0.5) of the last two axes, unclamped."""
    out = _resize_last_axis(x, size[1])
    out = _resize_last_axis(out.transpose(-1, -2), size[0]).transpose(-1, -2)
    return out.contiguous()


def bicubic_downsample(x: Tensor, r: int) -> Tensor:
    h, w = x.shape[-2:]
    if h % r or w % r:
        raise ValueError(f"frame size {h}x{w} is not divisible by scale {r}")
    return bicubic_resize(x, (h // r, w // r)).clamp(0.0, 1.0)


def bicubic_upsample(x: Tensor, r: int) -> Tensor:
    h, w = x.shape[-2:]
    return bicubic_resize(x, (h * r, w * r))


def degrade(hr_clip: Clip, r: int) -> Clip:
    """Bicubic x``r`` downsampling of every frame, clamped to [0, 1].

    The antialiased kernel can overshoot near sharp edges; results are
    clamped back into the pixel range.
    """
    if r < 1:
        raise ValueError(f"scale must be >= 1, got {r}")
    lr = bicubic_downsample(hr_clip.frames, r)
    return Clip(lr, hr_clip.scene_id, hr_clip.start_index)


# --------------------------------------------------------------------------
# Patching and augmentation


def sample_patch(sample: PairedSample, size: int = 64, rng=None) -> PairedSample:
    """Crop the same ``size`` x ``size`` window from every LR frame, plus the
    matching HR region. ``rng`` is a seed or a ``numpy.random.Generator``."""
    h, w = sample.lr.height, sample.lr.width
    if size > min(h, w):
        raise ValueError(f"patch size {size} exceeds LR frame size {h}x{w}")
    gen = np.random.default_rng(rng)
    y0 = int(gen.integers(0, h - size + 1))
    x0 = int(gen.integers(0, w - size + 1))
    r = sample.scale
    lr = sample.lr.frames[..., y0:y0 + size, x0:x0 + size]
    hr = sample.hr[..., r * y0:r * (y0 + size), r * x0:r * (x0 + size)]
    return PairedSample(Clip(lr, sample.lr.scene_id, sample.lr.start_index), hr, r, (y0, x0))


def dihedral(x: Tensor, hflip: bool = False, vflip: bool = False, rot90k: int = 0) -> Tensor:
    """hflip, then vflip, then ``rot90k`` clockwise quarter turns on the last two axes.

    One clockwise turn sends pixel (i, j) to (j, H - 1 - i).
    """
    if rot90k not in (0, 1, 2, 3):
        raise ValueError(f"rot90k must be in 0..3, got {rot90k}")
    if hflip:
        x = x.flip(-1)
    if vflip:
        x = x.flip(-2)
    if rot90k:
        x = torch.rot90(x, rot90k, dims=(-1, -2))
    return x


def augment(sample: PairedSample, hflip: bool = False, vflip: bool = False, rot90k: int = 0) -> PairedSample:
    lr = dihedral(sample.lr.frames, hflip, vflip, rot90k).contiguous()
    hr = dihedral(sample.hr, hflip, vflip, rot90k).contiguous()
    return PairedSample(Clip(lr, sample.lr.scene_id, sample.lr.start_index), hr, sample.scale, sample.origin)


def random_flags(rng: np.random.Generator) -> dict:
    return {
        "hflip": bool(rng.integers(2)),
        "vflip": bool(rng.integers(2)),
        "rot90k": int(rng.integers(4)),
    }


# --------------------------------------------------------------------------
# Synthetic satellite-like scenes


@dataclass
class MovingObject:
    y: float
    x: float
    h: float
    w: float
    vy: float  # pixels / frame
    vx: float
    color: tuple[float, float, float]

    def position(self, k: int) -> tuple[float, float]:
        return self.y + k * self.vy, self.x + k * self.vx


@dataclass
class SceneParams:
    num_objects: int = 6
    max_speed: float = 1.5
    texture_scale: float = 3.0
    T: int = 5
    H: int = 128
    W: int = 128
    num_buildings: int = 14
    objects: list[MovingObject] | None = None  # overrides random objects when given


def _coverage_1d(start: float, length: float, n: int) -> np.ndarray:
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(edges + 1, start + length) - np.maximum(edges, start), 0.0, 1.0)


def rect_coverage(y: float, x: float, h: float, w: float, H: int, W: int) -> np.ndarray:
    """Exact area coverage of the box [y, y+h) x [x, x+w) over the pixel grid."""
    return np.outer(_coverage_1d(y, h, H), _coverage_1d(x, w, W))


def _background(rng: np.random.Generator, p: SceneParams) -> np.ndarray:
    img = np.empty((3, p.H, p.W))
    base = gaussian_filter(rng.standard_normal((p.H, p.W)), p.texture_scale, mode="wrap")
    base = (base - base.min()) / max(float(np.ptp(base)), 1e-12)
    tint = rng.uniform(0.3, 0.6, size=3)
    for c in range(3):
        fine = gaussian_filter(rng.standard_normal((p.H, p.W)), 0.7 * p.texture_scale / 3 + 0.3, mode="wrap")
        img[c] = tint[c] + 0.25 * (base - 0.5) + 0.04 * fine
    # Static man-made structures: sharp-edged blocks and straight roads.
    for _ in range(p.num_buildings):
        bh, bw = rng.uniform(4, max(4.0, p.H / 6)), rng.uniform(4, max(4.0, p.W / 6))
        by, bx = rng.uniform(-bh / 2, p.H - bh / 2), rng.uniform(-bw / 2, p.W - bw / 2)
        cov = rect_coverage(by, bx, bh, bw, p.H, p.W)
        color = rng.uniform(0.1, 0.95, size=3)
        img = img * (1 - cov) + color[:, None, None] * cov
    for _ in range(2):
        width = rng.uniform(2, 4)
        if rng.integers(2):
            cov = rect_coverage(rng.uniform(0, p.H - width), 0, width, p.W, p.H, p.W)
        else:
            cov = rect_coverage(0, rng.uniform(0, p.W - width), p.H, width, p.H, p.W)
        gray = rng.uniform(0.15, 0.35)
        img = img * (1 - cov) + gray * cov
    return img


def _random_objects(rng: np.random.Generator, p: SceneParams) -> list[MovingObject]:
    objs = []
    for _ in range(p.num_objects):
        h, w = rng.uniform(2, 6), rng.uniform(2, 6)
        speed = rng.uniform(0, p.max_speed)
        angle = rng.uniform(0, 2 * math.pi)
        objs.append(MovingObject(
            y=rng.uniform(0, p.H - h), x=rng.uniform(0, p.W - w), h=h, w=w,
            vy=speed * math.sin(angle), vx=speed * math.cos(angle),
            color=tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)),
        ))
    return objs


def scene_objects(seed: int, params: SceneParams) -> list[MovingObject]:
    """The moving objects ``synth_scene`` renders for this seed."""
    rng = np.random.default_rng(seed)
    _background(rng, params)
    if params.objects is not None:
        return list(params.objects)
    return _random_objects(rng, params)


def synth_scene(seed: int, params: SceneParams | None = None) -> Clip:
    """Static textured background with small rigid boxes moving at constant
    sub-pixel velocity. Deterministic per seed."""
    p = params or SceneParams()
    if p.max_speed < 0:
        raise ValueError(f"max_speed must be >= 0, got {p.max_speed}")
    rng = np.random.default_rng(seed)
    bg = _background(rng, p)
    objects = list(p.objects) if p.objects is not None else _random_objects(rng, p)
    frames = np.empty((p.T, 3, p.H, p.W))
    for k in range(p.T):
        img = bg.copy()
        for obj in objects:
            y, x = obj.position(k)
            cov = rect_coverage(y, x, obj.h, obj.w, p.H, p.W)
            img = img * (1 - cov) + np.asarray(obj.color)[:, None, None] * cov
        frames[k] = img
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    return Clip(torch.from_numpy(frames), scene_id=f"synth_{seed:05d}")


# --------------------------------------------------------------------------
# On-disk layout: <root>/<scene>/<zero-padded index>.png


def to_uint8(frame: Tensor) -> np.ndarray:
    arr = frame.detach().clamp(0, 1).mul(255).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def save_frame(frame: Tensor, path: Path) -> None:
    Image.fromarray(to_uint8(frame), mode="RGB").save(path)


def load_frame(path: Path) -> Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_clip(clip: Clip, directory: Path, digits: int = 4) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(clip.frames):
        path = directory / f"{k:0{digits}d}.png"
        save_frame(frame, path)
        paths.append(path)
    return paths


class DatasetError(ValueError):
    pass


@dataclass
class Scene:
    name: str
    paths: list[Path]
    height: int
    width: int

    def __len__(self) -> int:
        return len(self.paths)

    def load(self) -> Clip:
        return Clip(torch.stack([load_frame(p) for p in self.paths]), self.name, 0)

    def window_starts(self, T: int) -> range:
        return range(0, max(len(self.paths) - T + 1, 0))


@dataclass
class DatasetIndex:
    root: Path
    scenes: list[Scene]
    rejected: dict[str, str] = field(default_factory=dict)
    splits: dict[str, list[str]] = field(default_factory=dict)

    def scene(self, name: str) -> Scene:
        for s in self.scenes:
            if s.name == name:
                return s
        raise KeyError(name)

    def split(self, name: str) -> list[Scene]:
        if name not in self.splits:
            raise KeyError(f"manifest has no split {name!r}; available: {sorted(self.splits)}")
        wanted = set(self.splits[name])
        return [s for s in self.scenes if s.name in wanted]

    def windows(self, T: int) -> Iterator[tuple[Scene, int]]:
        for s in self.scenes:
            for start in s.window_starts(T):
                yield s, start


def _check_scene(scene_dir: Path) -> Scene:
    numbered = []
    for p in scene_dir.iterdir():
        m = FRAME_PATTERN.match(p.name)
        if m:
            numbered.append((int(m.group(1)), p))
    if not numbered:
        raise DatasetError("no numbered .png frames")
    numbered.sort()
    indices = [i for i, _ in numbered]
    expected = list(range(indices[0], indices[0] + len(indices)))
    if indices != expected:
        missing = sorted(set(expected) - set(indices))
        raise DatasetError(f"missing frame indices {missing[:10]}")
    sizes = {}
    for i, p in numbered:
        with Image.open(p) as im:
            if im.mode != "RGB":
                raise DatasetError(f"{p.name}: expected 8-bit RGB, got mode {im.mode}")
            sizes.setdefault(im.size, []).append(p.name)
    if len(sizes) > 1:
        desc = ", ".join(f"{w}x{h}: {len(v)} frames" for (w, h), v in sizes.items())
        raise DatasetError(f"inconsistent frame sizes ({desc})")
    (w, h), = sizes
    return Scene(scene_dir.name, [p for _, p in numbered], h, w)


def load_dataset(root: str | Path, strict: bool = False) -> DatasetIndex:
    """Index ``<root>/<scene>/<index>.png``.

    Broken scenes are skipped and listed in ``rejected`` with a reason, or
    raise ``DatasetError`` when ``strict``. An optional ``manifest.json``
    mapping split names to scene lists is read from the root.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    scenes, rejected = [], {}
    for scene_dir in sorted(d for d in root.iterdir() if d.is_dir()):
        try:
            scenes.append(_check_scene(scene_dir))
        except DatasetError as exc:
            if strict:
                raise DatasetError(f"scene {scene_dir.name}: {exc}") from exc
            log.warning("rejecting scene %s: %s", scene_dir.name, exc)
            rejected[scene_dir.name] = str(exc)
    splits = {}
    manifest = root / "manifest.json"
    if manifest.exists():
        splits = {k: list(v) for k, v in json.loads(manifest.read_text()).items()}
    return DatasetIndex(root, scenes, rejected, splits)


def write_manifest(root: Path, splits: dict[str, Sequence[str]]) -> None:
    (Path(root) / "manifest.json").write_text(json.dumps({k: list(v) for k, v in splits.items()}, indent=2))


# --------------------------------------------------------------------------
# In-memory paired source for training


class PairedClipSource:
    """HR clips held in memory with their bicubic LR counterparts.

    ``draw`` returns a random window, patch and dihedral transform, all
    driven by the caller's generator so runs are reproducible.
    """

    def __init__(self, clips: Sequence[Clip], T: int, scale: int):
        if T % 2 == 0:
            raise ValueError(f"window length must be odd, got {T}")
        self.T, self.scale = T, scale
        self.hr = [c.frames for c in clips]
        self.lr = [degrade(c, scale).frames for c in clips]
        self.names = [c.scene_id for c in clips]
        self.windows = [(i, s) for i, f in enumerate(self.hr) for s in range(f.shape[0] - T + 1)]
        if not self.windows:
            raise ValueError(f"no clip has {T} frames")

    def __len__(self) -> int:
        return len(self.windows)

    def sample(self, index: int) -> PairedSample:
        i, s = self.windows[index]
        lr = Clip(self.lr[i][s:s + self.T], self.names[i], s)
        return PairedSample(lr, self.hr[i][s + self.T // 2], self.scale)

    def draw(self, rng: np.random.Generator, patch: int | None, augment_data: bool = True) -> tuple[int, PairedSample]:
        index = int(rng.integers(len(self.windows)))
        sample = self.sample(index)
        if patch is not None:
            sample = sample_patch(sample, patch, rng)
        if augment_data:
            sample = augment(sample, **random_flags(rng))
        return index, sample
