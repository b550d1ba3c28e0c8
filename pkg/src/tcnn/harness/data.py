"""Patch manifests (JSON Lines) and in-memory patch datasets."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import CLASSES
from ..pipeline import load_gray, upscale_bicubic


@dataclass
class PatchRecord:
    path: str
    label: str
    source_id: str
    patch_index: int
    split: str | None = None


def write_manifest(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=False) + "\n")


def read_manifest(path):
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(PatchRecord(**json.loads(line)))
    check_manifest(records)
    return records


def check_manifest(records):
    labels = {}
    for rec in records:
        if rec.label not in CLASSES:
            raise ValueError(f"{rec.path}: label {rec.label!r} is not one of {CLASSES}")
        prev = labels.setdefault(rec.source_id, rec.label)
        if prev != rec.label:
            raise ValueError(f"source image {rec.source_id} carries labels {prev} and {rec.label}")


class PatchDataset:
    """Upscaled uint8 patches with labels, source ids and stable patch uids.

    ``uids`` index the patch in the full manifest, so augmentation streams
    stay tied to the patch rather than to its position within a split.
    """

    def __init__(self, images, labels, source_ids, uids):
        self.images = images
        self.labels = np.asarray(labels, dtype=np.intp)
        self.source_ids = list(source_ids)
        self.uids = np.asarray(uids, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, mask_or_index):
        idx = np.flatnonzero(mask_or_index) if np.asarray(mask_or_index).dtype == bool else np.asarray(mask_or_index)
        return PatchDataset(self.images[idx], self.labels[idx], [self.source_ids[i] for i in idx], self.uids[idx])

    def select_sources(self, sources):
        keep = set(sources)
        return self.subset(np.array([s in keep for s in self.source_ids], dtype=bool))

    @classmethod
    def from_manifest(cls, records, root, target=224):
        root = Path(root)
        images = np.empty((len(records), target, target), dtype=np.uint8)
        for i, rec in enumerate(records):
            images[i] = upscale_bicubic(load_gray(root / rec.path), target)
        labels = [CLASSES.index(r.label) for r in records]
        return cls(images, labels, [r.source_id for r in records], np.arange(len(records)))
