"""Epoch loop with Adam, validation-loss early stopping and checkpointing."""

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Tape, Tensor, no_grad
from .data import batches
from .errors import ConfigError, DivergenceError
from .losses import LossWeights, total_loss
from .model import build, forward
from .optim import AdamState, adam_step
from .rng import Rng

log = logging.getLogger(__name__)


@dataclass
class TrainPlan:
    max_epochs: int = 150
    patience: int = 20
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    lr: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 < self.patience:
            raise ConfigError("patience must be positive")
        if self.patience >= self.max_epochs:
            log.debug("patience %d >= max_epochs %d: early stopping cannot trigger",
                      self.patience, self.max_epochs)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainResult:
    best_params: object
    best_epoch: int
    best_val_loss: float
    history: list
    last_params: object
    optimizer: AdamState


class EarlyStopping:
    """Track the best validation loss; signal a stop after ``patience`` misses."""

    def __init__(self, patience):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.misses = 0

    def update(self, epoch, val_loss):
        """Return ``(improved, stop)`` after recording ``val_loss``."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.misses = val_loss, epoch, 0
            return True, False
        self.misses += 1
        return False, self.misses >= self.patience


def predict_batches(params, samples, batch_size):
    """Eval-mode probabilities for ``samples`` as one (n, 1, h, w) array."""
    outs = []
    with no_grad():
        for x, _ in batches(samples, batch_size):
            outs.append(forward(params, Tensor(x), mode="eval").data)
    return np.concatenate(outs)


def validation_loss(params, samples, batch_size, weights):
    """Total loss over the whole validation set, confusion pooled across images."""
    p = predict_batches(params, samples, batch_size)
    y = np.stack([s.label for s in samples])
    with no_grad():
        return total_loss(Tensor(p), Tensor(y), weights).item()


def _diagnose(tape, loss):
    node = tape.first_nonfinite()
    where = f"first non-finite tensor is the output of {node.op} {node.output.shape}" if node else \
        "all intermediate tensors are finite"
    return DivergenceError(f"training diverged (loss={loss}); {where}")


def train_step(params, state, x, y, weights, rng):
    """One forward/backward/Adam update; returns the batch loss."""
    with Tape() as tape:
        p = forward(params, Tensor(x), mode="train", rng=rng)
        loss = total_loss(p, Tensor(y), weights)
    value = loss.item()
    if not np.isfinite(value):
        raise _diagnose(tape, value)
    grads = tape.backward(loss)
    named = {name: grads[t] for name, t in params.items()}
    for name, g in named.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name}")
    adam_step(params, named, state)
    return value


def write_history(path, history, best_epoch):
    lines = ["epoch,train_loss,val_loss,seconds"]
    lines += [f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},{r.seconds:.3f}" for r in history]
    lines.append(f"best_epoch={best_epoch}")
    Path(path).write_text("\n".join(lines) + "\n")


def train(plan, config, train_samples, val_samples, out_dir=None, params=None):
    """Fit a model; returns the best-validation parameters and per-epoch history.

    When ``out_dir`` is given, ``best.sau2``, ``last.sau2`` and ``history.csv``
    are (re)written after every epoch.
    """
    if not train_samples or not val_samples:
        raise ConfigError("training and validation sets must be non-empty")
    run = Rng(plan.seed)
    if params is None:
        params = build(config, run.split("init"))
    state = AdamState(lr=plan.lr)
    stopper = EarlyStopping(plan.patience)
    best = params.copy()
    history = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, plan.max_epochs + 1):
        start = time.perf_counter()
        erng = run.split("epoch").split(epoch)
        order = erng.split("shuffle").permutation(len(train_samples))
        losses = []
        for b, (x, y) in enumerate(batches(train_samples, plan.batch_size, order)):
            losses.append(train_step(params, state, x, y, plan.weights, erng.split("batch").split(b)))
        val = validation_loss(params, val_samples, plan.batch_size, plan.weights)
        rec = EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - start)
        history.append(rec)
        improved, stop = stopper.update(epoch, val)
        if improved:
            best = params.copy()
        log.info("epoch %d train %.5f val %.5f%s", epoch, rec.train_loss, val, " *" if improved else "")
        if out is not None:
            if improved:
                checkpoint.save_checkpoint(out / "best.sau2", best)
            checkpoint.save_checkpoint(out / "last.sau2", params, state)
            write_history(out / "history.csv", history, stopper.best_epoch)
        if stop:
            log.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break
    return TrainResult(best, stopper.best_epoch, stopper.best, history, params, state)
