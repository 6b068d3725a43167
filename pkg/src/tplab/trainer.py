"""Mini-batch SGD with validation early stopping and loss-module detachment."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from tplab import nnet
from tplab import rng as rngmod
from tplab.objective import LossCfg

TWO_PHASE = "two_phase_early_stop"
NEVER = "never"
FIXED_EPOCH = "fixed_epoch"


class TrainingAborted(RuntimeError):
    def __init__(self, message, epoch, batch):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass(frozen=True)
class TrainCfg:
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    patience: int = 30
    max_epochs: int = 500
    detach_schedule: str = TWO_PHASE
    detach_at: int = 0  # epoch for FIXED_EPOCH
    loss_cfg: LossCfg = field(default_factory=LossCfg)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.detach_schedule not in (TWO_PHASE, NEVER, FIXED_EPOCH):
            raise ValueError(f"unknown detach_schedule {self.detach_schedule!r}")


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)  # (epoch, train_loss, val_acc, phase)
    best_epoch: int = 0
    detach_epoch: int | None = None
    stopped_epoch: int = 0

    @property
    def val_accuracy(self):
        return [e[2] for e in self.epochs]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_acc", "phase"])
        for epoch, loss, acc, phase in self.epochs:
            w.writerow([epoch, repr(loss), repr(acc), phase])
        return buf.getvalue()


def evaluate(model, frames):
    """Fraction of frames whose argmax logit (lowest index on ties) equals the label."""
    if len(frames) == 0:
        raise ValueError("cannot evaluate on an empty frame set")
    pred = np.argmax(nnet.forward(model, frames.x, modules=False).logits, axis=1)
    return float(np.mean(pred == frames.y))


def _batches(n, batch_size, g):
    perm = g.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) % 2:
            idx = idx[:-1]  # pairing needs an even batch; dropped sample returns next epoch
        if len(idx):
            yield idx


def train(labeled, val, cfg, arch=None, model=None):
    """Train a fresh model (``arch``) or continue ``model``; returns (model, history).

    Phase 1 runs until validation accuracy has not improved for ``patience``
    epochs.  Under the two-phase schedule the best checkpoint is then restored,
    loss-module gradients are detached from the backbone, and training
    continues until a second patience expiry.  The returned model holds the
    best validation checkpoint seen overall.
    """
    if len(labeled) < 2:
        raise ValueError(f"labeled set of {len(labeled)} frames is smaller than one even batch")
    if len(val) == 0:
        raise ValueError("validation set is empty")
    if model is None:
        if arch is None:
            raise ValueError("need either arch (fresh) or model (continue)")
        model = nnet.init_model(arch, cfg.seed)
    else:
        model = model.copy()
    g = rngmod.stream(cfg.seed, rngmod.TRAIN)
    hist = TrainHistory()

    detach = False
    phase = 1
    best_acc = -np.inf
    best_params = {k: v.copy() for k, v in model.params.items()}
    phase_best = -np.inf
    since = 0
    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.detach_schedule == FIXED_EPOCH and not detach and epoch > cfg.detach_at:
            detach = True
            hist.detach_epoch = epoch - 1
        losses = []
        for b, idx in enumerate(_batches(len(labeled), cfg.batch_size, g)):
            try:
                total, _, _, grads = nnet.loss_and_grads(
                    model, labeled.x[idx], labeled.y[idx], cfg.loss_cfg, detach=detach, rng=g
                )
            except FloatingPointError as e:
                raise TrainingAborted(f"epoch {epoch}, batch {b}: {e}", epoch, b) from e
            if not np.isfinite(total):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            nnet.sgd_step(model, grads, cfg.lr, cfg.momentum)
            losses.append(total)
        try:
            acc = evaluate(model, val)
        except FloatingPointError as e:
            raise TrainingAborted(f"epoch {epoch}, validation: {e}", epoch, b) from e
        hist.epochs.append((epoch, float(np.mean(losses)), acc, phase))
        hist.stopped_epoch = epoch
        if acc > best_acc:
            best_acc = acc
            hist.best_epoch = epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        if acc > phase_best:
            phase_best = acc
            since = 0
        else:
            since += 1
        if since >= cfg.patience:
            if cfg.detach_schedule == TWO_PHASE and phase == 1:
                model.params = {k: v.copy() for k, v in best_params.items()}
                model.velocity = {k: np.zeros_like(v) for k, v in model.velocity.items()}
                detach = True
                hist.detach_epoch = epoch
                phase = 2
                phase_best = -np.inf
                since = 0
            else:
                break
    model.params = best_params
    return model, hist
