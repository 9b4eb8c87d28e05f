"""Mini-batch training loop with plateau LR decay, early stopping and best-weight restore."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from ..errors import ConfigError, PreconditionError, TrainingError
from .losses import bce_multilabel
from .model import Model
from .optim import AdamW, EarlyStopping, PlateauScheduler

log = logging.getLogger(__name__)

IMPROVEMENT_DELTA = 1e-6


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    plateau_patience: int = 3
    plateau_factor: float = 0.1
    max_epochs: int = 500
    early_stop_patience: int = 25
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 1e-6 <= self.learning_rate <= 1e-3 * (1 + 1e-12):
            raise ConfigError(f"learning_rate {self.learning_rate} outside [1e-6, 1e-3]")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0 < self.plateau_patience < self.early_stop_patience < self.max_epochs:
            raise ConfigError(
                "need 0 < plateau_patience < early_stop_patience < max_epochs, got "
                f"{self.plateau_patience}, {self.early_stop_patience}, {self.max_epochs}"
            )

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ArrayDataset:
    """Inputs and multi-hot targets, with an optional per-sample train-time transform."""

    x: np.ndarray
    y: np.ndarray
    transform: Optional[Callable[[np.ndarray, np.random.Generator], np.ndarray]] = None

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise PreconditionError(f"{len(self.x)} inputs but {len(self.y)} targets")

    def __len__(self):
        return len(self.x)

    def batch(self, idx: np.ndarray, rngs=None) -> tuple:
        xb = self.x[idx]
        if self.transform is not None and rngs is not None:
            xb = np.stack([self.transform(x, r) for x, r in zip(xb, rngs)])
        return xb, self.y[idx]


@dataclass
class TrainingLog:
    config: dict
    epochs: List[dict] = field(default_factory=list)
    lr_changes: List[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_epoch: int = 0
    stopped_early: bool = False
    start_epoch: int = 1

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    """Everything needed to continue a run: optimizer moments and schedule counters."""

    epoch: int
    lr: float
    adam_step: int
    adam_m: dict
    adam_v: dict
    scheduler: dict
    best_val_loss: float


def evaluate_loss(model: Model, data: ArrayDataset, batch_size: int = 32) -> float:
    total = 0.0
    for i in range(0, len(data), batch_size):
        xb, yb = data.x[i : i + batch_size], data.y[i : i + batch_size]
        probs = model.forward(xb)
        total += bce_multilabel(probs, yb)[0] * len(xb)
    return total / len(data)


def sample_rngs(seed: int, epoch: int, indices) -> list:
    return [np.random.default_rng([seed, epoch, int(i)]) for i in indices]


def train(
    model: Model,
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    cfg: TrainConfig,
    resume: TrainState | None = None,
    on_epoch: Callable[[dict], None] | None = None,
):
    """Train in place and return ``(model, log, state)``.

    The returned model carries the weights of the best validation epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise PreconditionError("training and validation splits must be non-empty")
    opt = AdamW(lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    sched = PlateauScheduler(cfg.plateau_patience, cfg.plateau_factor, IMPROVEMENT_DELTA)
    stopper = EarlyStopping(cfg.early_stop_patience, IMPROVEMENT_DELTA)
    start = 1
    if resume is not None:
        start = resume.epoch + 1
        opt.lr = resume.lr
        opt.state.step = resume.adam_step
        opt.state.m = {k: v.astype(model.dtype).copy() for k, v in resume.adam_m.items()}
        opt.state.v = {k: v.astype(model.dtype).copy() for k, v in resume.adam_v.items()}
        sched.load_state_dict(resume.scheduler)
        stopper.best = resume.best_val_loss

    tlog = TrainingLog(config=cfg.to_json(), start_epoch=start, best_epoch=start - 1)
    tlog.best_val_loss = stopper.best
    best_params = model.copy_params()
    params = model.named_params()
    end = cfg.max_epochs
    if start > end:
        raise ConfigError(f"resume point epoch {start - 1} already reaches max_epochs {end}")
    epoch = start - 1

    for epoch in range(start, end + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
        running, seen = 0.0, 0
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            xb, yb = train_set.batch(idx, sample_rngs(cfg.seed, epoch, idx))
            model.zero_grad()
            probs = model.forward(xb, train=True)
            loss, grad = bce_multilabel(probs, yb)
            if not math.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch)
            model.backward(grad)
            try:
                opt.step(params, model.named_grads())
            except TrainingError as exc:
                raise TrainingError(str(exc), epoch) from None
            running += loss * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss = evaluate_loss(model, val_set, max(cfg.batch_size, 32))
        if not math.isfinite(val_loss):
            raise TrainingError("non-finite validation loss", epoch)

        improved = stopper.step(val_loss)
        if improved:
            best_params = model.copy_params()
            tlog.best_epoch = epoch
            tlog.best_val_loss = val_loss
        new_lr = sched.step(val_loss, opt.lr)
        record = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": opt.lr}
        tlog.epochs.append(record)
        if new_lr != opt.lr:
            tlog.lr_changes.append({"epoch": epoch, "from": opt.lr, "to": new_lr})
            log.info("epoch %d: lr %.3g -> %.3g", epoch, opt.lr, new_lr)
            opt.lr = new_lr
        log.debug("epoch %d train %.5f val %.5f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(record)
        if stopper.should_stop:
            tlog.stopped_early = True
            break

    tlog.stop_epoch = epoch
    model.set_params(best_params)
    state = TrainState(
        epoch=epoch,
        lr=opt.lr,
        adam_step=opt.state.step,
        adam_m={k: v.copy() for k, v in opt.state.m.items()},
        adam_v={k: v.copy() for k, v in opt.state.v.items()},
        scheduler=sched.state_dict(),
        best_val_loss=stopper.best,
    )
    return model, tlog, state
