"""Procedural corrosion-like wall textures standing in for unfolded pipe images.

Each image is a grain field (smoothed white noise, summed over two octaves),
optionally pitted and blotched, then degraded by a random brightness level,
a linear illumination gradient and a few locally blurred spots.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .. import CLASSES
from ..pipeline import save_gray, slice_patches
from .data import PatchRecord, write_manifest

log = logging.getLogger(__name__)


@dataclass
class ClassTexture:
    grain_scale: float  # gaussian sigma of the base grain, px
    grain_amp: float
    pit_density: float  # pits per 10,000 px
    pit_radius: tuple  # (min, max) px
    pit_depth: float
    blotches: int  # large dark blotches per image
    blotch_amp: float


def _default_classes():
    return {
        "ND": ClassTexture(1.0, 0.05, 0.0, (1.0, 2.0), 0.0, 0, 0.0),
        "MC": ClassTexture(2.0, 0.07, 5.0, (1.5, 3.0), 0.25, 0, 0.0),
        "AC": ClassTexture(3.0, 0.09, 14.0, (2.0, 5.0), 0.3, 4, 0.2),
    }


@dataclass
class SynthConfig:
    classes: dict = field(default_factory=_default_classes)
    images_per_class: int = 50
    height: int = 94
    width: int = 768
    brightness: tuple = (0.45, 0.65)
    illumination_amp: float = 0.15
    blur_spots: int = 3  # upper bound; each image draws 0..blur_spots
    blur_sigma: float = 2.5
    seed: int = 0

    def validate(self):
        if set(self.classes) != set(CLASSES):
            raise ValueError(f"need texture parameters for exactly {CLASSES}")
        triples = {(c.grain_scale, c.pit_density, c.blotches) for c in self.classes.values()}
        if len(triples) != len(CLASSES):
            raise ValueError("class texture parameters must differ pairwise")
        if self.images_per_class < 1:
            raise ValueError("images_per_class must be positive")
        return self


def _grain(rng, shape, scale, amp):
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    fine = ndimage.gaussian_filter(rng.standard_normal(shape), scale / 2, mode="wrap")
    g = field_ / (field_.std() + 1e-12) + 0.5 * fine / (fine.std() + 1e-12)
    return amp * g / 1.118


def _stamp(img, rng, count, radius, depth, soft):
    h, w = img.shape
    yy, xx = np.mgrid[:h, :w]
    for _ in range(count):
        r = rng.uniform(*radius)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        d = depth * rng.uniform(0.7, 1.3)
        # local window keeps the cost proportional to the pit size
        y0, y1 = max(0, int(cy - 3 * r)), min(h, int(cy + 3 * r) + 1)
        x0, x1 = max(0, int(cx - 3 * r)), min(w, int(cx + 3 * r) + 1)
        dist2 = (yy[y0:y1, x0:x1] - cy) ** 2 + (xx[y0:y1, x0:x1] - cx) ** 2
        if soft:
            img[y0:y1, x0:x1] -= d * np.exp(-dist2 / (2 * r * r))
        else:
            img[y0:y1, x0:x1] -= d / (1 + np.exp((np.sqrt(dist2) - r) * 2.0))


def render_image(texture, cfg, rng):
    """One float image in [0, 1] of the configured size."""
    shape = (cfg.height, cfg.width)
    img = np.full(shape, rng.uniform(*cfg.brightness))
    img += _grain(rng, shape, texture.grain_scale, texture.grain_amp)

    n_pits = rng.poisson(texture.pit_density * cfg.height * cfg.width / 1e4)
    _stamp(img, rng, n_pits, texture.pit_radius, texture.pit_depth, soft=False)
    _stamp(img, rng, texture.blotches, (8.0, 20.0), texture.blotch_amp, soft=True)

    # linear illumination gradient in a random direction
    yy, xx = np.mgrid[:cfg.height, :cfg.width]
    angle = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(angle) * xx / cfg.width + np.sin(angle) * yy / cfg.height)
    img += cfg.illumination_amp * rng.uniform(0, 1) * (ramp - ramp.mean())

    blurred = ndimage.gaussian_filter(img, cfg.blur_sigma)
    for _ in range(rng.integers(0, cfg.blur_spots + 1)):
        cy, cx = rng.uniform(0, cfg.height), rng.uniform(0, cfg.width)
        rad = rng.uniform(10, 30)
        mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad * rad))
        img = img * (1 - mask) + blurred * mask
    return np.clip(img, 0, 1)


def synth_dataset(cfg, out_dir, window=94, overlap=0.5):
    """Write images, sliced patches and ``manifest.jsonl`` under ``out_dir``.

    Returns the manifest records. Source ids look like ``MC_007``.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    records = []
    for label in CLASSES:
        texture = cfg.classes[label]
        for k in range(cfg.images_per_class):
            source_id = f"{label}_{k:03d}"
            rng = np.random.default_rng([cfg.seed, CLASSES.index(label), k])
            img = np.round(render_image(texture, cfg, rng) * 255).astype(np.uint8)
            save_gray(out_dir / "images" / f"{source_id}.png", img)
            for idx, patch in enumerate(slice_patches(img, window, overlap).patches):
                rel = f"patches/{source_id}_p{idx}.png"
                save_gray(out_dir / rel, patch)
                records.append(PatchRecord(rel, label, source_id, idx))
    write_manifest(out_dir / "manifest.jsonl", records)
    log.info("wrote %d images, %d patches to %s", len(CLASSES) * cfg.images_per_class, len(records), out_dir)
    return records
