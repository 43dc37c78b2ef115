"""Synthetic shapes segmentation data, cue masking, augmentation and dataset I/O.

Each image shows one to a few colored shapes (disk, square, triangle, ring)
on a smooth noisy background.  Shapes are painted back to front, so the
label of a pixel is the class of the topmost shape covering it.  Images are
quantized to multiples of 1/255 so a saved dataset reloads bit-exactly.
"""

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import GenerationError, ParseError
from .imageio import load_image, save_image
from .losses import IGNORE

CLASS_NAMES = ("background", "disk", "square", "triangle", "ring")

# base RGB color per shape class (index 1..4)
_CLASS_COLORS = np.array([
    [0.0, 0.0, 0.0],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.15],
])

SPLITS = {"train": (0, 800), "val": (1, 100), "test": (2, 100)}


@dataclass
class ShapesConfig:
    size: int = 64
    n_classes: int = 5
    shapes_per_image: tuple = (2, 4)
    radius: tuple = (10.0, 18.0)
    overlap: bool = True
    noise_sigma: float = 0.04
    color_jitter: float = 0.3
    color_cue: float = 1.0     # 1: each class has its own color; 0: colors carry no class information
    seed: int = 0


@dataclass
class Shape:
    kind: int            # class id, 1..4
    cy: float
    cx: float
    r: float
    theta: float

    def contains(self, yy, xx):
        """Analytic region test at pixel centers (integer coordinates)."""
        dy, dx = yy - self.cy, xx - self.cx
        name = CLASS_NAMES[self.kind]
        if name == "disk":
            return dy * dy + dx * dx <= self.r * self.r
        if name == "ring":
            d2 = dy * dy + dx * dx
            return (d2 <= self.r * self.r) & (d2 >= (0.55 * self.r) ** 2)
        c, s = math.cos(self.theta), math.sin(self.theta)
        u, v = c * dx + s * dy, -s * dx + c * dy
        if name == "square":
            half = self.r / math.sqrt(2.0)
            return (np.abs(u) <= half) & (np.abs(v) <= half)
        # equilateral triangle with circumradius r: three half-planes at
        # distance r/2 from the center
        inside = np.ones(np.broadcast(u, v).shape, dtype=bool)
        for k in range(3):
            a = self.theta + 2.0 * math.pi * k / 3.0
            inside &= (math.cos(a) * dx + math.sin(a) * dy) <= self.r / 2.0
        return inside


@dataclass
class SegSample:
    image: np.ndarray                 # (c, h, w) float in [0, 1]
    label: np.ndarray                 # (h, w) uint8, IGNORE = 255
    mask: np.ndarray = None           # optional extra channel
    shapes: list = field(default_factory=list)


def _background(rng, size, sigma):
    base = rng.uniform(0.35, 0.6, size=3)
    gy, gx = rng.uniform(-0.15, 0.15, size=(2, 3))
    ramp = np.linspace(-0.5, 0.5, size)
    img = (base[:, None, None] + gy[:, None, None] * ramp[None, :, None]
           + gx[:, None, None] * ramp[None, None, :])
    return img + rng.normal(0.0, sigma, size=(3, size, size))


def render(cfg, rng):
    size = cfg.size
    r_lo, r_hi = cfg.radius
    if 2 * r_hi + 1 > size:
        raise GenerationError(f"shapes of radius {r_hi} cannot fit a {size}x{size} canvas")
    image = _background(rng, size, cfg.noise_sigma)
    label = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n_shapes = int(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1))
    shapes = []
    for _ in range(n_shapes):
        for _attempt in range(100):
            kind = int(rng.integers(1, cfg.n_classes))
            r = float(rng.uniform(r_lo, r_hi))
            cy, cx = rng.uniform(r, size - 1 - r, size=2)
            shape = Shape(kind, float(cy), float(cx), r, float(rng.uniform(0, 2 * math.pi)))
            region = shape.contains(yy, xx)
            if not region.any():
                continue
            if cfg.overlap or not (label[region] != 0).any():
                break
        else:
            raise GenerationError("could not place a non-overlapping shape after 100 attempts")
        random_color = rng.uniform(0.0, 1.0, 3)
        color = (cfg.color_cue * _CLASS_COLORS[(kind - 1) % 4 + 1] + (1.0 - cfg.color_cue) * random_color
                 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3))
        image[:, region] = color[:, None] + rng.normal(0.0, cfg.noise_sigma, size=(3, int(region.sum())))
        label[region] = kind
        shapes.append(shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return SegSample(image, label, shapes=shapes)


def generate(cfg, count, split=0):
    """``count`` samples; sample ``i`` is drawn from ``default_rng([seed, split, i])``."""
    return [render(cfg, np.random.default_rng([cfg.seed, split, i])) for i in range(count)]


def make_splits(cfg, sizes=None):
    """Train/val/test lists with a fixed sub-seed per split."""
    out = {}
    for name, (split_id, default_count) in SPLITS.items():
        count = default_count if sizes is None else sizes.get(name, default_count)
        out[name] = generate(cfg, count, split_id)
    return out


def background_fraction(samples):
    labels = np.concatenate([s.label.ravel() for s in samples])
    return float(np.mean(labels == 0))


def dataset_mean(samples):
    return np.mean([s.image.mean(axis=(1, 2)) for s in samples], axis=0)


def to_batch(samples, mean=None):
    x = np.stack([s.image for s in samples])
    if mean is not None:
        x = x - np.asarray(mean).reshape(1, -1, 1, 1)
    return x, np.stack([s.label for s in samples])


# -- cue masking -------------------------------------------------------------------

MASK_MODES = ("none", "fg_only", "bg_only", "shape_only")


def foreground(label):
    return (label != 0) & (label != IGNORE)


def apply_mask(sample, mode):
    """Zero out background (fg_only) or foreground (bg_only), or replace the
    image by the binary foreground mask (shape_only).  Labels never change."""
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    if mode == "none":
        return sample
    fg = foreground(sample.label)
    if mode == "fg_only":
        image = np.where(fg[None], sample.image, 0.0)
    elif mode == "bg_only":
        image = np.where(fg[None], 0.0, sample.image)
    else:
        image = np.repeat(fg[None].astype(np.float64), sample.image.shape[0], axis=0)
    return replace(sample, image=image)


# -- augmentation -------------------------------------------------------------------

def _shift(arr, dy, dx, fill):
    out = np.full_like(arr, fill)
    h, w = arr.shape[-2:]
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    out[..., dst_y, dst_x] = arr[..., src_y, src_x]
    return out


def augment(sample, mirror=False, jitter=0, seed=None, flip=None):
    """Random horizontal mirror (p = 0.5, or forced by ``flip``) and an integer
    translation uniform in ``[-jitter, jitter]^2``.  Vacated image pixels are
    zero and vacated labels IGNORE."""
    rng = np.random.default_rng(seed)
    image, label = sample.image, sample.label
    do_flip = flip if flip is not None else (mirror and rng.random() < 0.5)
    if do_flip:
        image, label = image[..., ::-1], label[..., ::-1]
    if jitter:
        dy, dx = (int(v) for v in rng.integers(-jitter, jitter + 1, size=2))
        image = _shift(image, dy, dx, 0.0)
        label = _shift(label, dy, dx, IGNORE)
    return replace(sample, image=np.ascontiguousarray(image), label=np.ascontiguousarray(label))


# -- dataset directories -------------------------------------------------------------

def save_dataset(root, samples):
    """Write ``images/NNNN.png`` (or ``.pgm`` for one channel), ``labels/NNNN.png``
    and ``manifest.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    ids = []
    for i, s in enumerate(samples):
        sid = f"{i:04d}"
        pixels = np.round(s.image * 255.0).astype(np.uint8)
        if pixels.shape[0] == 1:
            save_image(root / "images" / f"{sid}.pgm", pixels[0])
        else:
            save_image(root / "images" / f"{sid}.png", pixels.transpose(1, 2, 0))
        save_image(root / "labels" / f"{sid}.png", s.label.astype(np.uint8))
        ids.append(sid)
    (root / "manifest.txt").write_text("".join(f"{sid}\n" for sid in ids))


def load_dataset(root):
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise ParseError("dataset has no manifest.txt", path=root)
    samples = []
    for sid in manifest.read_text().split():
        candidates = [root / "images" / f"{sid}{ext}" for ext in (".png", ".pgm", ".ppm")]
        img_path = next((p for p in candidates if p.exists()), None)
        if img_path is None:
            raise ParseError(f"no image for id {sid}", path=root)
        pixels = load_image(img_path)
        image = (pixels[None] if pixels.ndim == 2 else pixels.transpose(2, 0, 1)) / 255.0
        label = load_image(root / "labels" / f"{sid}.png")
        if label.ndim != 2:
            raise ParseError("label maps must be single-channel", path=root / "labels" / f"{sid}.png")
        samples.append(SegSample(np.ascontiguousarray(image), label))
    return samples


def load_splits(root):
    """Splits saved under ``root/<split>/``; missing splits are omitted."""
    root = Path(root)
    return {name: load_dataset(root / name) for name in SPLITS if (root / name / "manifest.txt").exists()}
