"""Sequential models, the three desk-scale presets, resource accounting and checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .._io import atomic_write_bytes
from ..errors import PreconditionError
from .layers import Layer, layer_from_config

N_CLASSES = 14
BYTES_PER_VALUE = 4


@dataclass
class ModelSpec:
    layers: List[dict]
    input_shape: Tuple[int, ...]
    n_classes: int = N_CLASSES
    name: str = "custom"

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "layers": [dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelSpec":
        return cls(
            layers=[dict(layer) for layer in doc["layers"]],
            input_shape=tuple(doc["input_shape"]),
            n_classes=int(doc.get("n_classes", N_CLASSES)),
            name=doc.get("name", "custom"),
        )


def _conv(nd, out, stride=1):
    return {"type": f"conv{nd}d", "out_channels": out, "kernel": 3, "stride": stride, "padding": 1}


def _tiny2d_body(widths=(16, 32, 64, 64), n_classes=N_CLASSES) -> List[dict]:
    layers: List[dict] = []
    for i, w in enumerate(widths):
        layers += [_conv(2, w), {"type": "relu"}]
        if i < len(widths) - 1:
            layers.append({"type": "maxpool", "size": 2})
    layers += [{"type": "gap"}, {"type": "dense", "units": n_classes}, {"type": "sigmoid"}]
    return layers


def tiny2d(size: int = 64, n_classes: int = N_CLASSES) -> ModelSpec:
    """Four conv blocks + global average pooling on 3-channel projections."""
    return ModelSpec(_tiny2d_body(n_classes=n_classes), (3, size, size), n_classes, "tiny2d")


def tiny2p5d(size: int = 64, n_classes: int = N_CLASSES) -> ModelSpec:
    layers = [{"type": "shrink2p5d"}] + _tiny2d_body(n_classes=n_classes)
    return ModelSpec(layers, (1, size, size, size), n_classes, "tiny2p5d")


def tiny3d(size: int = 64, n_classes: int = N_CLASSES) -> ModelSpec:
    layers = [
        _conv(3, 16, stride=2),
        {"type": "relu"},
        {"type": "maxpool", "size": 2},
        _conv(3, 32, stride=2),
        {"type": "relu"},
        _conv(3, 54),
        {"type": "relu"},
        {"type": "gap"},
        {"type": "dense", "units": n_classes},
        {"type": "sigmoid"},
    ]
    return ModelSpec(layers, (1, size, size, size), n_classes, "tiny3d")


PRESETS = {"tiny2d": tiny2d, "tiny2p5d": tiny2p5d, "tiny3d": tiny3d}
REPRESENTATIONS = {"2d": "tiny2d", "2.5d": "tiny2p5d", "3d": "tiny3d"}


class Model:
    """Stack of layers built for a fixed per-sample input shape."""

    def __init__(self, spec: ModelSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers: List[Layer] = [layer_from_config(c) for c in spec.layers]
        rng = np.random.default_rng(seed)
        shape = tuple(spec.input_shape)
        for layer in self.layers:
            shape = layer.build(shape, rng, self.dtype)
        if self.layers and shape != (spec.n_classes,):
            raise PreconditionError(f"model output shape {shape} != ({spec.n_classes},)")
        self.output_shape = shape

    # parameters are addressed as "<layer index>.<name>"
    def named_params(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_grads(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def set_params(self, values: Dict[str, np.ndarray]) -> None:
        own = self.named_params()
        if set(own) != set(values):
            raise PreconditionError(f"parameter names differ: {sorted(set(own) ^ set(values))}")
        for name, arr in values.items():
            i, k = name.split(".", 1)
            if own[name].shape != tuple(arr.shape):
                raise PreconditionError(f"shape mismatch for {name}: {own[name].shape} vs {arr.shape}")
            self.layers[int(i)].params[k] = np.array(arr, dtype=self.dtype)
        for layer in self.layers:
            layer.zero_grad()

    def copy_params(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_params().items()}

    def astype(self, dtype) -> "Model":
        clone = Model.__new__(Model)
        clone.spec = self.spec
        clone.dtype = np.dtype(dtype)
        clone.layers = [layer_from_config(c) for c in self.spec.layers]
        shape = tuple(self.spec.input_shape)
        rng = np.random.default_rng(0)
        for layer in clone.layers:
            shape = layer.build(shape, rng, clone.dtype)
        clone.output_shape = shape
        clone.set_params(self.named_params())
        return clone

    def param_count(self) -> int:
        return sum(layer.param_count() for layer in self.layers)

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def _check_input(self, x):
        if x.ndim != len(self.spec.input_shape) + 1 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise PreconditionError(f"expected batch of {self.spec.input_shape}, got {x.shape}")

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x)
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad = grad.astype(self.dtype, copy=False)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def predict(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[0] == 0:
            return np.zeros((0, self.spec.n_classes), dtype=self.dtype)
        return np.concatenate([self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    return model.forward(batch)


def layer_param_formula(cfg: dict, in_shape: Sequence[int]) -> Tuple[int, Tuple[int, ...]]:
    """Closed-form parameter count and output shape of one layer, without building it."""
    kind = cfg["type"]
    if kind in ("conv2d", "conv3d"):
        nd = 2 if kind == "conv2d" else 3
        k, s, p, out = cfg.get("kernel", 3), cfg.get("stride", 1), cfg.get("padding", 0), cfg["out_channels"]
        count = out * in_shape[0] * k**nd + out
        spatial = tuple((n + 2 * p - k) // s + 1 for n in in_shape[1:])
        return count, (out,) + spatial
    if kind == "shrink2p5d":
        d = in_shape[1]
        return 3 * d + 3, (3, d, d)
    if kind == "dense":
        fan_in = int(np.prod(in_shape))
        return fan_in * cfg["units"] + cfg["units"], (cfg["units"],)
    if kind == "maxpool":
        size = cfg.get("size", 2)
        return 0, (in_shape[0],) + tuple(n // size for n in in_shape[1:])
    if kind == "gap":
        return 0, (in_shape[0],)
    return 0, tuple(in_shape)


def resource_report(model: Model | ModelSpec | None) -> dict:
    """Parameter count plus 4-byte-per-value memory estimates.

    ``input_activation_bytes`` covers a single input sample; activation totals
    add every layer output for one sample.
    """
    if model is None:
        return {"parameter_count": 0, "input_activation_bytes": 0, "weight_bytes": 0, "activation_bytes": 0}
    spec = model.spec if isinstance(model, Model) else model
    shape = tuple(spec.input_shape)
    params = 0
    act = int(np.prod(shape))
    input_values = act
    for cfg in spec.layers:
        n, shape = layer_param_formula(cfg, shape)
        params += n
        act += int(np.prod(shape))
    return {
        "parameter_count": params,
        "input_activation_bytes": input_values * BYTES_PER_VALUE,
        "weight_bytes": params * BYTES_PER_VALUE,
        "activation_bytes": act * BYTES_PER_VALUE,
    }


# ---------------------------------------------------------------------------
# checkpoint container: magic, u32 header length, JSON header, raw LE float32
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"XPJCKPT1"


@dataclass
class Checkpoint:
    spec: ModelSpec
    params: Dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    extra: Dict[str, np.ndarray] = field(default_factory=dict)

    def build_model(self) -> Model:
        model = Model(self.spec, seed=0)
        model.set_params(self.params)
        return model


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for group, arrays in (("params", ckpt.params), ("extra", ckpt.extra)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            raw = arr.tobytes()
            entries.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {"spec": ckpt.spec.to_json(), "meta": ckpt.meta, "arrays": entries}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise PreconditionError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    try:
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PreconditionError(f"corrupt checkpoint header: {exc}") from exc
    base = pos + hlen
    groups: Dict[str, Dict[str, np.ndarray]] = {"params": {}, "extra": {}}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(buf):
            raise PreconditionError(f"checkpoint truncated in array {e['name']}")
        arr = np.frombuffer(buf, dtype="<f4", count=e["nbytes"] // 4, offset=start)
        groups[e["group"]][e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return Checkpoint(ModelSpec.from_json(header["spec"]), groups["params"], header.get("meta", {}), groups["extra"])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(Path(path), encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())
