"""AdamW, reduce-on-plateau and early stopping."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ..errors import TrainingError


@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam moments with weight decay applied to the parameters directly."""

    def __init__(self, lr=1e-3, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = AdamWState()

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in {name}")
        st = self.state
        st.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for name, p in params.items():
            g = grads[name]
            m = st.m.get(name)
            if m is None:
                m = st.m[name] = np.zeros_like(p)
                st.v[name] = np.zeros_like(p)
            v = st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= (self.lr * (update + self.weight_decay * p)).astype(p.dtype)


def optimizer_step(params, grads, optimizer: AdamW):
    optimizer.step(params, grads)
    return params, optimizer.state


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, patience=3, factor=0.1, min_delta=1e-6, min_lr=0.0):
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.min_lr = min_lr
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, metric: float, lr: float) -> float:
        if metric < self.best - self.min_delta:
            self.best = metric
            self.bad_epochs = 0
            return lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            return max(lr * self.factor, self.min_lr)
        return lr

    def state_dict(self):
        return {"best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, st):
        self.best = float(st["best"])
        self.bad_epochs = int(st["bad_epochs"])


class EarlyStopping:
    def __init__(self, patience=25, min_delta=1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.bad_epochs = 0

    def step(self, metric: float) -> bool:
        """Record one epoch; returns True when this epoch improved on the best."""
        if metric < self.best - self.min_delta:
            self.best = metric
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience
