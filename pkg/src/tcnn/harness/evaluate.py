"""Patch- and image-level scoring."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .. import nn


@dataclass
class Metrics:
    accuracy: float
    confusion: np.ndarray  # rows: true class, columns: predicted class
    loss: float | None = None
    mse: float | None = None
    precision: list = field(default_factory=list)
    recall: list = field(default_factory=list)

    @property
    def count(self):
        return int(self.confusion.sum())


def confusion_matrix(y_true, y_pred, n_classes=3):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def metrics_from_predictions(y_true, y_pred, n_classes=3, loss=None, mse=None):
    cm = confusion_matrix(y_true, y_pred, n_classes)
    total = cm.sum()
    if total == 0:
        raise ValueError("cannot score an empty subset")
    diag = np.diag(cm).astype(float)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision = [float(d / c) if c else 0.0 for d, c in zip(diag, col)]
    recall = [float(d / r) if r else 0.0 for d, r in zip(diag, row)]
    return Metrics(float(np.trace(cm) / total), cm, loss, mse, precision, recall)


def majority_vote(predictions, source_ids):
    """One label per source image; ties go to the most severe (highest index) class.

    Returns ``(sources, labels)`` with sources in first-seen order.
    """
    votes = {}
    for pred, src in zip(predictions, source_ids):
        votes.setdefault(src, Counter())[int(pred)] += 1
    sources = list(votes)
    labels = []
    for src in sources:
        counter = votes[src]
        best = max(counter.values())
        labels.append(max(k for k, v in counter.items() if v == best))
    return sources, np.array(labels, dtype=np.intp)


def predict(model, dataset, standardizer=None, batch_size=64):
    """Class probabilities for every patch of ``dataset`` (no augmentation)."""
    from ..pipeline import to_tensor

    out = []
    for i in range(0, len(dataset), batch_size):
        x = to_tensor(dataset.images[i:i + batch_size], dtype=model.dtype.type)
        if standardizer is not None:
            x = standardizer.apply(x)
        out.append(nn.softmax(model.forward(x)))
    return np.concatenate(out)


def evaluate(model, dataset, standardizer=None, aggregation="patch", batch_size=64):
    """Metrics on ``dataset``. ``aggregation="image"`` majority-votes patches per source image."""
    if len(dataset) == 0:
        raise ValueError("empty subset")
    k = model.config.classes
    probs = predict(model, dataset, standardizer, batch_size)
    pred = probs.argmax(axis=1)
    if aggregation == "patch":
        eps = np.finfo(np.float64).tiny
        loss = float(-np.log(np.maximum(probs[np.arange(len(pred)), dataset.labels].astype(np.float64), eps)).mean())
        return metrics_from_predictions(dataset.labels, pred, k, loss, nn.onehot_mse(probs, dataset.labels))
    if aggregation == "image":
        sources, voted = majority_vote(pred, dataset.source_ids)
        truth = dict(zip(dataset.source_ids, dataset.labels))
        return metrics_from_predictions([truth[s] for s in sources], voted, k)
    raise ValueError(f"aggregation must be 'patch' or 'image', got {aggregation!r}")
