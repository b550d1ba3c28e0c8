"""Hold-out and cross-validation experiments plus their report files.

Report files carry no timings or paths, so identical seeds reproduce them
byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .. import CLASSES
from ..model import ArchConfig, load_weights, save_weights
from ..pipeline import Standardizer
from . import plotting
from .evaluate import evaluate
from .train import fit

log = logging.getLogger(__name__)

STAGES = ("train", "validation", "test")
REPORT_HEADER = ("split", "stage", "accuracy", "loss", "mse")


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


# ------------------------------------------------------------------ model directory


def save_model_dir(path, model, standardizer=None, extra=None):
    """``weights.tcnw`` plus a ``model.json`` sidecar with architecture and input normalisation."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_weights(model, path / "weights.tcnw")
    meta = {
        "arch": asdict(model.config),
        "classes": list(CLASSES),
        "standardizer": asdict(standardizer) if standardizer else None,
    }
    meta.update(extra or {})
    (path / "model.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_model_dir(path, dtype=np.float32):
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    model = load_weights(path / "weights.tcnw", ArchConfig(**meta["arch"]), dtype=dtype)
    std = Standardizer(**meta["standardizer"]) if meta.get("standardizer") else None
    return model, std


# ------------------------------------------------------------------ report writers


def write_rows(path, rows, header=REPORT_HEADER):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_confusion(path, cm):
    rows = [[CLASSES[i]] + [int(v) for v in row] for i, row in enumerate(np.asarray(cm))]
    write_rows(path, rows, header=("true\\pred",) + CLASSES)


def read_confusion(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[int(v) for v in r[1:]] for r in rows])


def write_history(path, history):
    keys = ("epoch", "train_loss", "val_loss", "val_mse", "val_accuracy")
    rows = [[h["epoch"]] + [_fmt(h[k]) for k in keys[1:]] for h in history]
    write_rows(path, rows, header=keys)


def holdout_table(shares, metrics):
    lines = [
        f"{'Dataset':<12}{'Images (%)':>12}{'Accuracy (%)':>14}",
        "-" * 38,
    ]
    for stage in STAGES:
        lines.append(f"{stage.capitalize():<12}{100 * shares[stage]:>12.1f}{100 * metrics[stage].accuracy:>14.2f}")
    return "\n".join(lines) + "\n"


def cv_table(fold_rows):
    test = np.array([r["test"] for r in fold_rows])
    mean, std = cv_summary(test)
    lines = [
        f"{'Fold':<6}{'Images (%)':>12}{'Training':>10}{'Validation':>12}{'Test':>8}",
        "-" * 48,
    ]
    for k, r in enumerate(fold_rows, 1):
        lines.append(f"{k:<6}{100 * r['share']:>12.1f}{100 * r['train']:>10.2f}"
                     f"{100 * r['validation']:>12.2f}{100 * r['test']:>8.2f}")
    lines.append("-" * 48)
    lines.append(f"Test accuracy: {100 * mean:.2f}% +/- {100 * std:.2f}% (mean +/- std over {len(test)} folds)")
    return "\n".join(lines) + "\n"


def cv_summary(values):
    """Mean and sample standard deviation (n - 1 denominator)."""
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return float(values.mean()), std


# ------------------------------------------------------------------ experiments


@dataclass
class ExperimentResult:
    name: str
    metrics: dict  # stage -> Metrics (patch level)
    image_metrics: dict  # stage -> Metrics (image level)
    shares: dict  # stage -> fraction of patches
    fit: object

    @property
    def model(self):
        return self.fit.model

    def report_rows(self):
        rows = []
        for stage in STAGES:
            m = self.metrics[stage]
            rows.append([self.name, stage, _fmt(m.accuracy), _fmt(m.loss), _fmt(m.mse)])
        for stage in STAGES:
            rows.append([self.name, f"{stage}_image", _fmt(self.image_metrics[stage].accuracy), "", ""])
        return rows


def run_experiment(dataset, split, arch, train_cfg, out_dir=None, dtype=np.float32):
    """Train on ``split``, score every subset, and (optionally) write the report bundle."""
    subsets = {stage: dataset.select_sources(getattr(split, stage)) for stage in STAGES}
    for stage, ds in subsets.items():
        if len(ds) == 0:
            raise ValueError(f"split {split.name}: {stage} subset is empty")
    log.info("%s: %d / %d / %d patches", split.name, *(len(subsets[s]) for s in STAGES))

    result = fit(subsets["train"], subsets["validation"], arch, train_cfg, dtype=dtype)
    metrics = {s: evaluate(result.model, ds, result.standardizer) for s, ds in subsets.items()}
    image_metrics = {s: evaluate(result.model, ds, result.standardizer, "image") for s, ds in subsets.items()}
    total = sum(len(ds) for ds in subsets.values())
    shares = {s: len(ds) / total for s, ds in subsets.items()}
    exp = ExperimentResult(split.name, metrics, image_metrics, shares, result)
    if out_dir is not None:
        write_experiment(exp, out_dir)
    return exp


def write_experiment(exp, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model_dir(out, exp.model, exp.fit.standardizer,
                   {"best_epoch": exp.fit.best_epoch, "stopped_epoch": exp.fit.stopped_epoch,
                    "aborted": exp.fit.aborted})
    write_history(out / "history.csv", exp.fit.history)
    write_rows(out / "report.csv", exp.report_rows())
    (out / "report.txt").write_text(holdout_table(exp.shares, exp.metrics))
    for stage in STAGES:
        write_confusion(out / f"confusion_{stage}.csv", exp.metrics[stage].confusion)
    if exp.fit.history:
        plotting.plot_history(exp.fit.history, out / "history.png", title=exp.name)
    plotting.plot_confusion(exp.metrics["test"].confusion, out / "confusion_test.png", title=f"{exp.name} test")


def run_cv(dataset, folds, splits, arch, train_cfg, out_dir=None, dtype=np.float32):
    """One experiment per rotation, then the fold table with mean +/- std."""
    results = [run_experiment(dataset, sp, arch, train_cfg,
                              None if out_dir is None else Path(out_dir) / sp.name, dtype)
               for sp in splits]
    n_all = len(dataset)
    fold_rows = []
    for k, exp in enumerate(results):
        share = len(dataset.select_sources(folds[k])) / n_all
        fold_rows.append({"fold": exp.name, "share": share,
                          **{s: exp.metrics[s].accuracy for s in STAGES}})
    if out_dir is not None:
        write_cv_report(results, fold_rows, out_dir)
    return results, fold_rows


def write_cv_report(results, fold_rows, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [row for exp in results for row in exp.report_rows()]
    for stage in STAGES:
        acc = [e.metrics[stage].accuracy for e in results]
        loss = [e.metrics[stage].loss for e in results]
        mse = [e.metrics[stage].mse for e in results]
        stats = [cv_summary(v) for v in (acc, loss, mse)]
        rows.append(["mean", stage] + [_fmt(s[0]) for s in stats])
        rows.append(["std", stage] + [_fmt(s[1]) for s in stats])
    write_rows(out / "cv_report.csv", rows)
    (out / "cv_report.txt").write_text(cv_table(fold_rows))
    plotting.plot_cv_accuracies(fold_rows, out / "cv_accuracies.png")
