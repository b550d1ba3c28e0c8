"""Source-image level splits: stratified 3-fold rotation and hold-out.

All patches of one source image always land in the same subset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import CLASSES


@dataclass
class SplitSpec:
    mode: str = "holdout"  # "holdout" or "cv"
    fold_fractions: tuple = (0.34, 0.34, 0.32)
    validation_fraction: float = 0.2  # of the hold-out training images
    seed: int = 0

    def validate(self):
        if self.mode not in ("holdout", "cv"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if abs(sum(self.fold_fractions) - 1) > 1e-6:
            raise ValueError(f"fold fractions sum to {sum(self.fold_fractions)}, not 1")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        return self


@dataclass
class Split:
    """Source ids per subset; ``name`` tags the experiment (e.g. ``fold1``)."""

    name: str
    train: list
    validation: list
    test: list

    def check_disjoint(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise AssertionError(f"split {self.name} leaks source images across subsets")
        return self


def largest_remainder(total, fractions):
    """Integer counts summing to ``total`` in proportion to ``fractions`` (ties go to earlier entries)."""
    raw = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(raw + 1e-9).astype(int)
    short = total - counts.sum()
    order = sorted(range(len(raw)), key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[:short]:
        counts[k] += 1
    return counts.tolist()


def sources_by_class(records):
    """Sorted source ids per class label, in class order."""
    groups = {c: set() for c in CLASSES}
    for rec in records:
        groups[rec.label].add(rec.source_id)
    return {c: sorted(ids) for c, ids in groups.items()}


def _shuffled(ids, seed, key):
    rng = np.random.default_rng([seed, key])
    return [ids[i] for i in rng.permutation(len(ids))]


def make_folds(records, spec):
    """Stratified partition of source images into folds, plus the three rotations.

    Rotation k trains on fold k, validates on fold k+1 and tests on fold k+2
    (indices modulo 3). Returns ``(folds, splits)``.
    """
    spec.validate()
    n_folds = len(spec.fold_fractions)
    groups = sources_by_class(records)
    total = sum(len(v) for v in groups.values())
    if total < n_folds:
        raise ValueError(f"{total} source images cannot fill {n_folds} folds")
    folds = [[] for _ in range(n_folds)]
    for key, label in enumerate(CLASSES):
        ids = _shuffled(groups[label], spec.seed, key)
        start = 0
        for f, count in enumerate(largest_remainder(len(ids), spec.fold_fractions)):
            folds[f] += ids[start:start + count]
            start += count
    splits = []
    for k in range(n_folds):
        splits.append(Split(
            f"fold{k + 1}",
            train=folds[k],
            validation=folds[(k + 1) % n_folds],
            test=folds[(k + 2) % n_folds],
        ).check_disjoint())
    return folds, splits


def make_holdout(records, spec):
    """First two folds train, the last fold tests; a stratified share of training validates."""
    spec.validate()
    folds, _ = make_folds(records, SplitSpec("cv", spec.fold_fractions, spec.validation_fraction, spec.seed))
    train_pool = [s for f in folds[:-1] for s in f]
    test = list(folds[-1])

    label_of = {rec.source_id: rec.label for rec in records}
    per_class = [[s for s in train_pool if label_of[s] == c] for c in CLASSES]
    n_val = int(round(spec.validation_fraction * len(train_pool)))
    sizes = [len(p) for p in per_class]
    val_counts = largest_remainder(n_val, [s / len(train_pool) for s in sizes])
    validation, train = [], []
    for key, (pool, count) in enumerate(zip(per_class, val_counts)):
        ids = _shuffled(sorted(pool), spec.seed, 100 + key)
        validation += ids[:count]
        train += ids[count:]
    return Split("holdout", train, validation, test).check_disjoint()


def split_from_tags(records, name="tagged"):
    """Rebuild a hold-out split from records carrying ``train``/``validation``/``test`` tags."""
    subsets = {"train": set(), "validation": set(), "test": set()}
    for rec in records:
        if rec.split not in subsets:
            raise ValueError(f"{rec.path}: split tag {rec.split!r} is not train/validation/test")
        subsets[rec.split].add(rec.source_id)
    return Split(name, *(sorted(subsets[k]) for k in ("train", "validation", "test"))).check_disjoint()


def folds_from_tags(records):
    """Rebuild the CV folds from ``fold1``/``fold2``/``fold3`` tags."""
    tags = sorted({rec.split for rec in records})
    if not tags or not all(t and t.startswith("fold") for t in tags):
        raise ValueError(f"expected fold tags, found {tags}")
    folds = [sorted({r.source_id for r in records if r.split == t}) for t in tags]
    n = len(folds)
    return folds, [Split(f"fold{k + 1}", folds[k], folds[(k + 1) % n], folds[(k + 2) % n]).check_disjoint()
                   for k in range(n)]


def tag_records(records, split):
    """Copies of ``records`` with the split tag of their source image."""
    where = {}
    for key in ("train", "validation", "test"):
        for s in getattr(split, key):
            where[s] = key
    out = []
    for rec in records:
        out.append(type(rec)(rec.path, rec.label, rec.source_id, rec.patch_index, where.get(rec.source_id)))
    return out


def tag_folds(records, folds):
    where = {s: f"fold{k + 1}" for k, fold in enumerate(folds) for s in fold}
    return [type(r)(r.path, r.label, r.source_id, r.patch_index, where.get(r.source_id)) for r in records]
