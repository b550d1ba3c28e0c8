"""Image preprocessing: log-polar unfolding, patch slicing, bicubic upscaling,
augmentation and tensor conversion.

Gray images are plain 2-D numpy arrays, either ``uint8`` or floats in [0, 1].
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ file I/O


def load_gray(path):
    """Read a PNG/PGM (or anything Pillow opens) as a uint8 gray array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def save_gray(path, image):
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else "PNG"
    Image.fromarray(image, mode="L").save(path, format=fmt)


def _value_range(image):
    return (0.0, 255.0) if image.dtype == np.uint8 else (0.0, 1.0)


def _restore_dtype(values, like):
    lo, hi = _value_range(like)
    values = np.clip(values, lo, hi)
    if like.dtype == np.uint8:
        return np.round(values).astype(np.uint8)
    return values.astype(like.dtype if like.dtype.kind == "f" else np.float64)


# ------------------------------------------------------------------ log-polar


@dataclass
class UnfoldGeometry:
    """Sampling grid for the unfolding. ``None`` fields take image-derived defaults:
    centre of the image, the largest inscribed radius, and ``r_min = 0.1 * r_max``."""

    cx: float | None = None
    cy: float | None = None
    r_min: float | None = None
    r_max: float | None = None
    radial: int = 94
    angular: int = 768

    def resolve(self, height, width):
        cx = (width - 1) / 2 if self.cx is None else float(self.cx)
        cy = (height - 1) / 2 if self.cy is None else float(self.cy)
        if not (0 <= cx <= width - 1 and 0 <= cy <= height - 1):
            raise ValueError(f"centre ({cx}, {cy}) lies outside the {width}x{height} image")
        inscribed = min(cx, cy, width - 1 - cx, height - 1 - cy)
        r_max = inscribed if self.r_max is None else float(self.r_max)
        r_min = 0.1 * r_max if self.r_min is None else float(self.r_min)
        if r_min <= 0:
            raise ValueError(f"r_min must be positive, got {r_min}")
        if r_max <= r_min:
            raise ValueError(f"r_max ({r_max}) must exceed r_min ({r_min})")
        if r_max > inscribed + 1e-9:
            log.warning("r_max %.1f exceeds the inscribed radius %.1f; border samples clamp", r_max, inscribed)
        if self.radial < 2 or self.angular < 1:
            raise ValueError("need at least 2 radial and 1 angular sample")
        return cx, cy, r_min, r_max


def bilinear_sample(image, rows, cols):
    """Bilinear interpolation at fractional (row, col) positions, clamped to the border."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    r = np.clip(rows, 0, h - 1)
    c = np.clip(cols, 0, w - 1)
    r0 = np.minimum(np.floor(r).astype(np.intp), h - 2) if h > 1 else np.zeros(r.shape, np.intp)
    c0 = np.minimum(np.floor(c).astype(np.intp), w - 2) if w > 1 else np.zeros(c.shape, np.intp)
    fr = r - r0
    fc = c - c0
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    top = img[r0, c0] * (1 - fc) + img[r0, c1] * fc
    bottom = img[r1, c0] * (1 - fc) + img[r1, c1] * fc
    return top * (1 - fr) + bottom * fr


def unfold_log_polar(image, geom=None):
    """Resample a bore image onto (log-radius, angle): rows are radii, columns angles.

    Row ``i`` sits at radius ``r_min * (r_max / r_min) ** (i / (R - 1))`` and
    column ``j`` at angle ``2 * pi * j / A`` (counter-clockwise in image
    coordinates, i.e. towards increasing row index).
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("expected a 2-D gray image")
    geom = geom or UnfoldGeometry()
    cx, cy, r_min, r_max = geom.resolve(*image.shape)
    i = np.arange(geom.radial)
    j = np.arange(geom.angular)
    radii = r_min * (r_max / r_min) ** (i / (geom.radial - 1))
    theta = 2 * np.pi * j / geom.angular
    xs = cx + radii[:, None] * np.cos(theta)[None, :]
    ys = cy + radii[:, None] * np.sin(theta)[None, :]
    return _restore_dtype(bilinear_sample(image, ys, xs), image)


# ------------------------------------------------------------------ slicing


@dataclass
class PatchSet:
    patches: list
    offsets: list
    window: int

    def __len__(self):
        return len(self.patches)


def slice_patches(image, window=94, overlap=0.5):
    """Square windows sliding along the columns; incomplete trailing windows are dropped."""
    image = np.asarray(image)
    h, w = image.shape
    if window > h or window > w:
        raise ValueError(f"window {window} exceeds image extents {h}x{w}")
    if h != window:
        raise ValueError(f"image height {h} must equal the window {window}")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    stride = round(window * (1 - overlap))
    if stride < 1:
        raise ValueError("overlap leaves a stride below one pixel")
    count = (w - window) // stride + 1
    offsets = [k * stride for k in range(count)]
    patches = [image[:, o:o + window].copy() for o in offsets]
    return PatchSet(patches, offsets, window)


# ------------------------------------------------------------------ bicubic


def cubic_kernel(t, a=-0.5):
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def cubic_weights(n_in, n_out, a=-0.5):
    """(n_out, n_in) resampling matrix: half-pixel centres, 4 taps, replicated borders."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(np.intp)
    weights = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(-1, 3):
        idx = base + k
        wk = cubic_kernel(src - idx, a)
        np.add.at(weights, (rows, np.clip(idx, 0, n_in - 1)), wk)
    return weights


def upscale_bicubic(patch, target=224, a=-0.5):
    patch = np.asarray(patch)
    h, w = patch.shape
    if target < max(h, w):
        raise ValueError(f"target {target} is smaller than the patch {h}x{w}")
    wy = cubic_weights(h, target, a)
    wx = cubic_weights(w, target, a)
    out = wy @ patch.astype(np.float64) @ wx.T
    return _restore_dtype(out, patch)


# ------------------------------------------------------------------ augmentation

_FILL_MODES = {"nearest": ("nearest", "edge"), "reflect": ("mirror", "reflect"), "constant": ("constant", "constant")}


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    rotation: float = 15.0  # degrees, uniform in [-rotation, rotation]
    width_shift: float = 0.1  # fraction of the width
    height_shift: float = 0.1
    fill: str = "nearest"
    seed: int = 0

    def validate(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        for key in ("rotation", "width_shift", "height_shift"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be non-negative")
        if self.fill not in _FILL_MODES:
            raise ValueError(f"fill must be one of {sorted(_FILL_MODES)}")
        return self


def patch_rng(seed, *keys):
    """Independent random stream for one (seed, epoch, patch) combination."""
    return np.random.default_rng([seed, *keys])


def _shift(image, dy, dx, pad_mode):
    if dy == 0 and dx == 0:
        return image
    h, w = image.shape
    py, px = abs(dy), abs(dx)
    padded = np.pad(image, ((py, py), (px, px)), mode=pad_mode)
    return padded[py - dy:py - dy + h, px - dx:px - dx + w]


def augment(patch, cfg, rng):
    """Flip, rotate, then shift; the output keeps the input extent and dtype.

    The generator is consumed identically for every config (four draws), so a
    patch's stream does not depend on which transforms are enabled.
    """
    cfg.validate()
    patch = np.asarray(patch)
    h, w = patch.shape
    flip = rng.random() < cfg.flip_prob
    angle = rng.uniform(-cfg.rotation, cfg.rotation)
    max_dy = int(math.floor(cfg.height_shift * h))
    max_dx = int(math.floor(cfg.width_shift * w))
    dy = int(rng.integers(-max_dy, max_dy + 1))
    dx = int(rng.integers(-max_dx, max_dx + 1))
    nd_mode, pad_mode = _FILL_MODES[cfg.fill]

    out = patch[:, ::-1] if flip else patch
    if angle != 0:
        rotated = ndimage.rotate(out.astype(np.float64), angle, reshape=False, order=1, mode=nd_mode)
        out = _restore_dtype(rotated, patch)
    out = _shift(out, dy, dx, pad_mode)
    return np.ascontiguousarray(out)


# ------------------------------------------------------------------ tensors


def to_tensor(patches, dtype=np.float32):
    """Stack equal-sized images into (N, 1, H, W) with samples scaled to [0, 1]."""
    if len(patches) == 0:
        raise ValueError("no patches given")
    shapes = {np.shape(p) for p in patches}
    if len(shapes) != 1:
        raise ValueError(f"mixed patch extents: {sorted(shapes)}")
    arr = np.stack([np.asarray(p) for p in patches])
    if arr.dtype == np.uint8:
        arr = arr.astype(dtype) / dtype(255)
    else:
        arr = arr.astype(dtype)
    return arr[:, None]


@dataclass
class Standardizer:
    """Dataset-wide affine normalisation; fit on the training split only."""

    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, tensor):
        std = float(np.std(tensor, dtype=np.float64))
        return cls(float(np.mean(tensor, dtype=np.float64)), std if std > 0 else 1.0)

    def apply(self, tensor):
        return ((tensor - self.mean) / self.std).astype(tensor.dtype, copy=False)

    def invert(self, tensor):
        return (tensor * self.std + self.mean).astype(tensor.dtype, copy=False)
