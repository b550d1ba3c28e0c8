"""Training loop with per-epoch augmentation and early stopping on validation loss."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..model import TCNN, train_step
from ..pipeline import AugmentConfig, Standardizer, augment, patch_rng, to_tensor
from .evaluate import evaluate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    standardize: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def validate(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        self.augment.validate()
        return self

    def optimizer_config(self):
        return nn.OptimizerConfig(self.optimizer, self.lr, self.momentum, self.beta1, self.beta2)


class EarlyStopping:
    """Tracks the best validation loss and keeps a copy of the matching parameters."""

    def __init__(self, patience):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.best_params = None

    def update(self, epoch, val_loss, params):
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_params = {k: v.copy() for k, v in params.items()}
        return epoch - self.best_epoch >= self.patience


@dataclass
class FitResult:
    model: TCNN
    standardizer: Standardizer | None
    history: list  # one dict per epoch
    best_epoch: int
    stopped_epoch: int
    aborted: str | None = None


def make_batch(dataset, index, epoch, cfg, standardizer, dtype):
    """Augmented, normalised tensor for the patches at ``index``."""
    images = []
    for i in index:
        rng = patch_rng(cfg.augment.seed, epoch, int(dataset.uids[i]))
        images.append(augment(dataset.images[i], cfg.augment, rng))
    x = to_tensor(images, dtype=dtype)
    return standardizer.apply(x) if standardizer is not None else x


def fit(train_ds, val_ds, arch, cfg, model=None, dtype=np.float32):
    """Train a TCNN; returns the best-validation-loss weights and the epoch history."""
    cfg.validate()
    if len(train_ds) == 0 or len(val_ds) == 0:
        raise ValueError("training and validation subsets must be non-empty")
    model = model or TCNN(arch, seed=cfg.seed, dtype=dtype)
    standardizer = None
    if cfg.standardize:
        standardizer = Standardizer.fit(train_ds.images.astype(np.float32) / 255)
    opt_cfg = cfg.optimizer_config()
    state = nn.OptimizerState()
    stopper = EarlyStopping(cfg.patience)
    history = []
    aborted = None
    epoch = 0

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(train_ds))
        losses = []
        try:
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x = make_batch(train_ds, idx, epoch, cfg, standardizer, model.dtype.type)
                losses.append(train_step(model, x, train_ds.labels[idx], state, opt_cfg) * len(idx))
        except (nn.NonFiniteError, FloatingPointError) as exc:
            aborted = f"epoch {epoch}: {exc}"
            log.error("training aborted (%s); restoring epoch %d weights", exc, stopper.best_epoch)
            break
        val = evaluate(model, val_ds, standardizer)
        row = {
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / len(order)),
            "val_loss": val.loss,
            "val_mse": val.mse,
            "val_accuracy": val.accuracy,
        }
        history.append(row)
        log.info("epoch %3d  loss %.4f  val_loss %.4f  val_mse %.4f  val_acc %.4f  (%.1fs)",
                 epoch, row["train_loss"], val.loss, val.mse, val.accuracy, time.perf_counter() - t0)
        if stopper.update(epoch, val.loss, model.params):
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    if stopper.best_params is not None:
        model.params = stopper.best_params
    return FitResult(model, standardizer, history, stopper.best_epoch, epoch, aborted)
