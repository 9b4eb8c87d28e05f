"""Central-difference verification of analytic gradients (float64 path)."""
from __future__ import annotations

import numpy as np

from .losses import bce_multilabel
from .model import Model

STEP = 1e-5


def relative_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(model: Model, sample: np.ndarray, targets: np.ndarray, max_per_param: int | None = None,
               seed: int = 0, check_input: bool = True, h: float = STEP) -> dict:
    """Compare backprop against central differences of the mean BCE loss.

    Returns ``{"max_rel_error": float, "per_param": {name: float}}``. With
    ``max_per_param`` only a seeded random subset of each tensor is probed.
    """
    m = model.astype(np.float64)
    x = np.asarray(sample, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)

    m.zero_grad()
    probs = m.forward(x, train=True)
    _, g = bce_multilabel(probs, t)
    dx = m.backward(g)
    analytic = {k: v.copy() for k, v in m.named_grads().items()}

    def loss_at() -> float:
        return bce_multilabel(m.forward(x), t)[0]

    rng = np.random.default_rng(seed)
    per_param = {}
    targets_ = list(m.named_params().items())
    if check_input:
        targets_.append(("input", x))
        analytic["input"] = dx
    for name, arr in targets_:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_at()
            flat[i] = orig - h
            lm = loss_at()
            flat[i] = orig
            num[j] = (lp - lm) / (2 * h)
        ana = analytic[name].reshape(-1)[idx]
        per_param[name] = float(relative_error(ana, num).max()) if len(idx) else 0.0
    return {"max_rel_error": max(per_param.values()) if per_param else 0.0, "per_param": per_param}
