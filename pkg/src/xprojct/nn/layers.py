"""Layers with explicit forward/backward passes over numpy arrays.

Arrays are channels-first: (N, C, *spatial). Each layer owns its parameters
and the gradient buffers filled by ``backward``.
"""
from __future__ import annotations

import itertools
import math
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import PreconditionError


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.in_shape: Tuple[int, ...] | None = None
        self.out_shape: Tuple[int, ...] | None = None

    def build(self, in_shape, rng: np.random.Generator, dtype=np.float32) -> Tuple[int, ...]:
        self.in_shape = tuple(in_shape)
        self.out_shape = self._out_shape(self.in_shape)
        self._init_params(rng, dtype)
        self.zero_grad()
        return self.out_shape

    def _out_shape(self, in_shape):
        return in_shape

    def _init_params(self, rng, dtype):
        pass

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def config(self) -> dict:
        return {"type": self.kind}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _fan_in_uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvND(Layer):
    """N-d convolution (cross-correlation) through an im2col view."""

    def __init__(self, ndim: int, out_channels: int, kernel: int = 3, stride: int = 1, padding: int = 0):
        super().__init__()
        if ndim not in (2, 3):
            raise PreconditionError("only 2D and 3D convolutions are supported")
        if out_channels < 1 or kernel < 1 or stride < 1 or padding < 0:
            raise PreconditionError("bad convolution hyperparameters")
        self.nd = ndim
        self.kind = f"conv{ndim}d"
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self._cache = None

    def config(self):
        return {
            "type": self.kind,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "stride": self.stride,
            "padding": self.padding,
        }

    def _out_shape(self, in_shape):
        if len(in_shape) != self.nd + 1:
            raise PreconditionError(f"{self.kind} expects (C, {'x'.join('S' * self.nd)}) input, got {in_shape}")
        spatial = []
        for s in in_shape[1:]:
            o = (s + 2 * self.padding - self.kernel) // self.stride + 1
            if o < 1:
                raise PreconditionError(f"{self.kind}: input {in_shape} too small for kernel {self.kernel}")
            spatial.append(o)
        return (self.out_channels, *spatial)

    def _init_params(self, rng, dtype):
        cin = self.in_shape[0]
        fan_in = cin * self.kernel**self.nd
        self.params["W"] = _fan_in_uniform(rng, (self.out_channels, cin) + (self.kernel,) * self.nd, fan_in, dtype)
        self.params["b"] = _fan_in_uniform(rng, (self.out_channels,), fan_in, dtype)

    def _cols(self, x):
        p = self.padding
        if p:
            x = np.pad(x, [(0, 0), (0, 0)] + [(p, p)] * self.nd)
        axes = tuple(range(2, 2 + self.nd))
        win = sliding_window_view(x, (self.kernel,) * self.nd, axis=axes)
        if self.stride > 1:
            win = win[(slice(None), slice(None)) + (slice(None, None, self.stride),) * self.nd]
        return win, x.shape

    def forward(self, x, train=False):
        win, padded_shape = self._cols(x)
        # win: (N, C, *O, *K); contract C and K against W (Cout, C, *K)
        k_axes = tuple(range(2 + self.nd, 2 + 2 * self.nd))
        out = np.tensordot(win, self.params["W"], axes=((1,) + k_axes, tuple(range(1, 2 + self.nd))))
        out = np.moveaxis(out, -1, 1)
        out += self.params["b"].reshape((1, -1) + (1,) * self.nd)
        if train:
            self._cache = (win, padded_shape)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        win, padded_shape = self._cache
        nd = self.nd
        sp_axes = tuple(range(2, 2 + nd))
        self.grads["b"] += grad.sum(axis=(0,) + sp_axes)
        # dW[o, c, *k] = sum_{n, *O} grad[n, o, *O] * win[n, c, *O, *k]
        self.grads["W"] += np.tensordot(grad, win, axes=((0,) + sp_axes, (0,) + sp_axes))
        # dcols[n, *O, c, *k]
        dcols = np.tensordot(grad, self.params["W"], axes=((1,), (0,)))
        dx = np.zeros(padded_shape, dtype=grad.dtype)
        out_sp = grad.shape[2:]
        s = self.stride
        for off in itertools.product(range(self.kernel), repeat=nd):
            region = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, n in zip(off, out_sp)
            )
            contrib = dcols[(slice(None),) * (1 + nd) + (slice(None),) + off]
            dx[region] += np.moveaxis(contrib, -1, 1)
        p = self.padding
        if p:
            dx = dx[(slice(None), slice(None)) + (slice(p, -p),) * nd]
        self._cache = None
        return dx


class Shrink2p5D(Layer):
    """Learned weighted reduction of a cubic volume along each of its three axes.

    Input (1, D, D, D); output (3, D, D) where channel c collapses volume axis c
    with its own length-D weight vector and bias.
    """

    kind = "shrink2p5d"

    def _out_shape(self, in_shape):
        if len(in_shape) != 4 or in_shape[0] != 1:
            raise PreconditionError(f"shrink2p5d expects (1, D, D, D) input, got {in_shape}")
        d = in_shape[1]
        if in_shape[2] != d or in_shape[3] != d:
            raise PreconditionError(f"shrink2p5d needs a cubic volume, got {in_shape[1:]}")
        return (3, d, d)

    def _init_params(self, rng, dtype):
        d = self.in_shape[1]
        # start from mean projections
        self.params["W"] = np.full((3, d), 1.0 / d, dtype=dtype)
        self.params["b"] = np.zeros((3,), dtype=dtype)

    _SUBSCRIPTS = ("nkij,k->nij", "nikj,k->nij", "nijk,k->nij")
    _WGRAD = ("nij,nkij->k", "nij,nikj->k", "nij,nijk->k")

    def forward(self, x, train=False):
        v = x[:, 0]
        w, b = self.params["W"], self.params["b"]
        out = np.stack([np.einsum(self._SUBSCRIPTS[c], v, w[c]) for c in range(3)], axis=1)
        out += b.reshape(1, 3, 1, 1)
        if train:
            self._cache = v
        return out

    def backward(self, grad):
        v = self._cache
        w = self.params["W"]
        self.grads["b"] += grad.sum(axis=(0, 2, 3))
        for c in range(3):
            self.grads["W"][c] += np.einsum(self._WGRAD[c], grad[:, c], v)
        g0, g1, g2 = grad[:, 0], grad[:, 1], grad[:, 2]
        dv = (
            g0[:, None, :, :] * w[0][None, :, None, None]
            + g1[:, :, None, :] * w[1][None, None, :, None]
            + g2[:, :, :, None] * w[2][None, None, None, :]
        )
        self._cache = None
        return dv[:, None]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        g = grad * self._mask
        self._mask = None
        return g


class MaxPool(Layer):
    """Non-overlapping max pooling (kernel == stride); trailing remainders are dropped."""

    kind = "maxpool"

    def __init__(self, size: int = 2):
        super().__init__()
        if size < 1:
            raise PreconditionError("pool size must be positive")
        self.size = size

    def config(self):
        return {"type": self.kind, "size": self.size}

    def _out_shape(self, in_shape):
        spatial = [s // self.size for s in in_shape[1:]]
        if any(s < 1 for s in spatial):
            raise PreconditionError(f"maxpool {self.size} too large for {in_shape}")
        return (in_shape[0], *spatial)

    def _blocks(self, x):
        k = self.size
        nd = x.ndim - 2
        out_sp = [s // k for s in x.shape[2:]]
        x = x[(slice(None), slice(None)) + tuple(slice(0, o * k) for o in out_sp)]
        shape = list(x.shape[:2])
        for o in out_sp:
            shape += [o, k]
        b = x.reshape(shape)
        # (N, C, O1, O2.., k1, k2..)
        order = [0, 1] + [2 + 2 * i for i in range(nd)] + [3 + 2 * i for i in range(nd)]
        b = b.transpose(order)
        return b.reshape(b.shape[: 2 + nd] + (-1,)), out_sp

    def forward(self, x, train=False):
        blocks, out_sp = self._blocks(x)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (idx, x.shape, out_sp)
        return out

    def backward(self, grad):
        idx, in_shape, out_sp = self._cache
        k = self.size
        nd = len(out_sp)
        blocks = np.zeros(grad.shape + (k**nd,), dtype=grad.dtype)
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(grad.shape + (k,) * nd)
        order = [0, 1]
        for i in range(nd):
            order += [2 + i, 2 + nd + i]
        dx_core = blocks.transpose(order).reshape(grad.shape[:2] + tuple(o * k for o in out_sp))
        dx = np.zeros(in_shape, dtype=grad.dtype)
        dx[(slice(None), slice(None)) + tuple(slice(0, o * k) for o in out_sp)] = dx_core
        self._cache = None
        return dx


class GlobalAvgPool(Layer):
    kind = "gap"

    def _out_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, train=False):
        if train:
            self._shape = x.shape
        return x.reshape(x.shape[0], x.shape[1], -1).mean(axis=-1)

    def backward(self, grad):
        shape = self._shape
        n_sp = int(np.prod(shape[2:]))
        g = np.broadcast_to((grad / n_sp).reshape(grad.shape + (1,) * (len(shape) - 2)), shape)
        return np.ascontiguousarray(g)


class Dense(Layer):
    kind = "dense"

    def __init__(self, units: int):
        super().__init__()
        if units < 1:
            raise PreconditionError("dense units must be positive")
        self.units = units

    def config(self):
        return {"type": self.kind, "units": self.units}

    def _out_shape(self, in_shape):
        return (self.units,)

    def _init_params(self, rng, dtype):
        fan_in = int(np.prod(self.in_shape))
        self.params["W"] = _fan_in_uniform(rng, (fan_in, self.units), fan_in, dtype)
        self.params["b"] = _fan_in_uniform(rng, (self.units,), fan_in, dtype)

    def forward(self, x, train=False):
        flat = x.reshape(x.shape[0], -1)
        if train:
            self._cache = (flat, x.shape)
        return flat @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        flat, shape = self._cache
        self.grads["W"] += flat.T @ grad
        self.grads["b"] += grad.sum(axis=0)
        self._cache = None
        return (grad @ self.params["W"].T).reshape(shape)


class SigmoidHead(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        if train:
            self._out = out
        return out

    def backward(self, grad):
        p = self._out
        self._out = None
        return grad * p * (1.0 - p)


def layer_from_config(cfg: dict) -> Layer:
    kind = cfg.get("type")
    if kind in ("conv2d", "conv3d"):
        return ConvND(
            2 if kind == "conv2d" else 3,
            out_channels=int(cfg["out_channels"]),
            kernel=int(cfg.get("kernel", 3)),
            stride=int(cfg.get("stride", 1)),
            padding=int(cfg.get("padding", 0)),
        )
    if kind == "shrink2p5d":
        return Shrink2p5D()
    if kind == "relu":
        return ReLU()
    if kind == "maxpool":
        return MaxPool(int(cfg.get("size", 2)))
    if kind == "gap":
        return GlobalAvgPool()
    if kind == "dense":
        return Dense(int(cfg["units"]))
    if kind == "sigmoid":
        return SigmoidHead()
    raise PreconditionError(f"unknown layer type {kind!r}")
