from __future__ import annotations

import numpy as np

from ..errors import PreconditionError

EPS = 1e-7


def bce_multilabel(probs: np.ndarray, targets: np.ndarray, eps: float = EPS):
    """Mean binary cross-entropy over batch and classes.

    Returns ``(loss, dloss/dprobs)``; the gradient is zero where the clamp is active.
    """
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    if probs.shape != targets.shape:
        raise PreconditionError(f"probs {probs.shape} and targets {targets.shape} differ in shape")
    if probs.size == 0:
        raise PreconditionError("empty batch")
    p = np.clip(probs.astype(np.float64), eps, 1.0 - eps)
    t = targets.astype(np.float64)
    terms = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    loss = float(terms.mean())
    inside = (probs > eps) & (probs < 1.0 - eps)
    grad = (-(t / p) + (1.0 - t) / (1.0 - p)) * inside / probs.size
    return loss, grad.astype(probs.dtype)


def loss_multilabel_bce(probs, targets) -> float:
    return bce_multilabel(probs, targets)[0]
