from __future__ import annotations

import math

import numpy as np
import pytest

import importlib

from xprojct.errors import ConfigError, PreconditionError, TrainingError
from xprojct.nn import (
    AdamW,
    ArrayDataset,
    Checkpoint,
    EarlyStopping,
    Model,
    ModelSpec,
    PlateauScheduler,
    TrainConfig,
    bce_multilabel,
    grad_check,
    load_checkpoint,
    resource_report,
    save_checkpoint,
    tiny2d,
    tiny2p5d,
    tiny3d,
    train,
)
from xprojct.nn.model import decode_checkpoint, encode_checkpoint, layer_param_formula
from xprojct.projection import project_axis
from xprojct.volume import CtVolume

train_mod = importlib.import_module("xprojct.nn.train")

HEAD = [{"type": "gap"}, {"type": "dense", "units": 14}, {"type": "sigmoid"}]


def _spec(layers, shape, n=14):
    return ModelSpec(layers, shape, n)


def _targets(rng, n):
    return (rng.uniform(size=(n, 14)) < 0.5).astype(np.float64)


# --- forward -----------------------------------------------------------------


def test_zero_model_gives_half(rng):
    model = Model(tiny2d(16), seed=0)
    model.set_params({k: np.zeros_like(v) for k, v in model.named_params().items()})
    out = model.forward(rng.uniform(size=(2, 3, 16, 16)))
    assert np.all(out == 0.5)


def test_hand_computed_dense():
    model = Model(_spec([{"type": "dense", "units": 2}, {"type": "sigmoid"}], (2,), 2))
    model.set_params({"0.W": np.array([[1.0, -2.0], [0.5, 3.0]]), "0.b": np.array([0.25, -1.0])})
    x = np.array([[2.0, -1.0]])
    z = np.array([2 * 1.0 - 1 * 0.5 + 0.25, 2 * -2.0 + -1 * 3.0 - 1.0])
    assert np.allclose(model.forward(x)[0], 1 / (1 + np.exp(-z)), atol=1e-7)


@pytest.mark.parametrize("factory", [tiny2d, tiny2p5d, tiny3d])
def test_batch_independence_and_range(factory, rng):
    spec = factory(16)
    model = Model(spec, seed=1)
    x = rng.uniform(size=(4,) + tuple(spec.input_shape)).astype(np.float32)
    full = model.forward(x)
    assert np.array_equal(model.forward(x[2:3])[0], full[2])
    assert np.all((full > 0) & (full < 1))
    with pytest.raises(PreconditionError):
        model.forward(x[:, :, 1:])


def test_shrink_uniform_weights_equal_scaled_projections(rng):
    from xprojct.nn.layers import Shrink2p5D

    d = 6
    vol = rng.uniform(-1, 1, size=(d, d, d))
    layer = Shrink2p5D()
    layer.build((1, d, d, d), rng, np.float64)
    out = layer.forward(vol[None, None])[0]
    ctv = CtVolume(vol, axes="IPL")
    for c, axis in enumerate(("superior-inferior", "anterior-posterior", "right-left")):
        assert np.allclose(out[c], project_axis(ctv, axis).pixels / d, atol=1e-6)


def test_shrink_one_hot_selects_slice(rng):
    from xprojct.nn.layers import Shrink2p5D

    d, j = 5, 3
    layer = Shrink2p5D()
    layer.build((1, d, d, d), rng, np.float64)
    w = np.zeros((3, d))
    w[:, j] = 1.0
    layer.params["W"] = w
    vol = rng.uniform(size=(1, 1, d, d, d))
    out = layer.forward(vol)[0]
    assert np.array_equal(out[0], vol[0, 0, j])
    assert np.array_equal(out[1], vol[0, 0, :, j])
    assert np.array_equal(out[2], vol[0, 0, :, :, j])
    with pytest.raises(PreconditionError):
        Shrink2p5D().build((1, 4, 4, 5), rng)


# --- gradients -----------------------------------------------------------------


GRAD_CASES = {
    "dense": (_spec([{"type": "dense", "units": 14}, {"type": "sigmoid"}], (10,)), 1e-6),
    "conv2d": (
        _spec(
            [
                {"type": "conv2d", "out_channels": 4, "kernel": 3, "padding": 1},
                {"type": "relu"},
                {"type": "maxpool", "size": 2},
                {"type": "conv2d", "out_channels": 3, "kernel": 3, "stride": 2, "padding": 1},
                {"type": "relu"},
            ]
            + HEAD,
            (2, 8, 8),
        ),
        1e-4,
    ),
    "conv3d": (
        _spec(
            [
                {"type": "conv3d", "out_channels": 3, "kernel": 3, "stride": 2, "padding": 1},
                {"type": "relu"},
                {"type": "maxpool", "size": 2},
            ]
            + HEAD,
            (1, 7, 7, 7),
        ),
        1e-4,
    ),
    "shrink2p5d": (
        _spec([{"type": "shrink2p5d"}, {"type": "conv2d", "out_channels": 2, "kernel": 3, "padding": 1}] + HEAD, (1, 5, 5, 5)),
        1e-4,
    ),
}


@pytest.mark.parametrize("name", list(GRAD_CASES))
def test_gradients_match_central_differences(name):
    spec, tol = GRAD_CASES[name]
    rng = np.random.default_rng(7)
    model = Model(spec, seed=3)
    if name == "shrink2p5d":
        # spread the shrink weights so every path carries signal
        model.layers[0].params["W"] = rng.uniform(-1, 1, size=(3, 5)).astype(np.float32)
    x = rng.uniform(-1, 1, size=(2,) + tuple(spec.input_shape))
    res = grad_check(model, x, _targets(rng, 2))
    assert res["max_rel_error"] < tol, res["per_param"]


# --- loss ------------------------------------------------------------------------


def test_bce_closed_forms(rng):
    t = _targets(rng, 5)
    loss, _ = bce_multilabel(t.copy(), t)
    assert loss <= 1.2e-7
    loss, grad = bce_multilabel(np.full((5, 14), 0.5), t)
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    assert np.allclose(np.abs(grad), 2.0 / t.size)


def test_bce_matches_elementwise_oracle(rng):
    p = rng.uniform(0.01, 0.99, size=(6, 14))
    t = _targets(rng, 6)
    total = 0.0
    for i in range(6):
        for j in range(14):
            total += -(t[i, j] * math.log(p[i, j]) + (1 - t[i, j]) * math.log(1 - p[i, j]))
    assert bce_multilabel(p, t)[0] == pytest.approx(total / 84, rel=1e-12)
    with pytest.raises(PreconditionError):
        bce_multilabel(p, t[:, :3])


# --- optimiser / schedules --------------------------------------------------------


def test_adamw_first_step_and_decay():
    opt = AdamW(lr=1e-3, weight_decay=0.0)
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = np.array([0.5, -4.0, 1e-3])
    opt.step(p, {"w": g})
    expected = np.array([1.0, -2.0, 3.0]) - 1e-3 * g / (np.abs(g) + 1e-8)
    assert np.allclose(p["w"], expected, atol=1e-15)
    opt = AdamW(lr=1e-2, weight_decay=0.1)
    p = {"w": np.array([2.0, -4.0])}
    opt.step(p, {"w": np.zeros(2)})
    assert np.allclose(p["w"], np.array([2.0, -4.0]) * (1 - 1e-3))


def test_adamw_rejects_non_finite():
    with pytest.raises(TrainingError):
        AdamW().step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])})


def test_adamw_quadratic_bowl():
    target = np.array([3.0, -1.5, 0.25])
    p = {"w": np.zeros(3)}
    opt = AdamW(lr=0.05, weight_decay=0.0)
    for _ in range(500):
        opt.step(p, {"w": 2 * (p["w"] - target)})
    assert np.max(np.abs(p["w"] - target)) < 1e-3


def test_plateau_replay():
    sched = PlateauScheduler(patience=3, factor=0.1)
    lrs = []
    lr = 1e-3
    for loss in [1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5]:
        lr = sched.step(loss, lr)
        lrs.append(lr)
    # epoch 1 improves; 2-4 stagnate -> cut at 4; 5 stagnant (counter reset); 6 improves; 7-9 stagnate -> cut at 9
    assert lrs == pytest.approx([1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-5])
    stop = EarlyStopping(patience=25)
    flags = [stop.step(v) for v in [1.0] + [1.0] * 25]
    assert flags[0] and not any(flags[1:]) and stop.should_stop


def _toy_sets(rng, n=64):
    x = rng.normal(size=(n, 4)).astype(np.float32)
    y = np.zeros((n, 14), np.float32)
    y[:, 0] = x[:, 0] > 0
    y[:, 1] = x[:, 1] + x[:, 2] > 0
    return ArrayDataset(x, y)


def _separable_pairs(rng, n, flipped=0):
    """Two well-separated labels plus nuisance features; the first rows can be mislabelled."""
    y = (rng.uniform(size=(n, 2)) < 0.5).astype(np.float32)
    signal = (2 * y - 1) * 1.5 + rng.normal(0, 0.5, size=(n, 2))
    x = (np.concatenate([signal, rng.normal(size=(n, 4))], axis=1) * 4).astype(np.float32)
    y[:flipped] = 1 - y[:flipped]
    return ArrayDataset(x, y)


def test_train_converges_on_separable_toy():
    # two mislabelled validation rows give the validation loss a finite minimum
    model = Model(_spec([{"type": "dense", "units": 2}, {"type": "sigmoid"}], (6,), n=2), seed=0)
    cfg = TrainConfig(max_epochs=500, batch_size=8, seed=0, weight_decay=0.0)
    train_set = _separable_pairs(np.random.default_rng(1), 128)
    val_set = _separable_pairs(np.random.default_rng(99), 200, flipped=2)
    model, log, _ = train(model, train_set, val_set, cfg)
    assert log.stopped_early and log.stop_epoch < 500
    assert log.best_val_loss < 0.1
    assert log.stop_epoch == log.best_epoch + 25


def test_scripted_stagnation(monkeypatch, rng):
    script = iter([1.0, 0.9] + [0.9] * 40)
    monkeypatch.setattr(train_mod, "evaluate_loss", lambda *a, **k: next(script))
    spec = _spec([{"type": "dense", "units": 14}, {"type": "sigmoid"}], (4,))
    model = Model(spec, seed=0)
    snapshots = {}
    cfg = TrainConfig(max_epochs=100, batch_size=16, seed=0)

    def remember(rec):
        snapshots[rec["epoch"]] = model.copy_params()

    model, log, state = train(model, _toy_sets(rng), _toy_sets(rng), cfg, on_epoch=remember)
    assert log.best_epoch == 2
    assert log.stop_epoch == 27 and log.stopped_early
    # stagnation starts at epoch 3; a cut lands after every third stagnant epoch
    assert [c["epoch"] for c in log.lr_changes] == [5, 8, 11, 14, 17, 20, 23, 26]
    assert log.lr_changes[0]["to"] == pytest.approx(1e-4)
    for k, v in model.named_params().items():
        assert np.array_equal(v, snapshots[2][k])


def test_divergence_reports_epoch(monkeypatch, rng):
    script = iter([1.0, float("nan")])
    monkeypatch.setattr(train_mod, "evaluate_loss", lambda *a, **k: next(script))
    model = Model(_spec([{"type": "dense", "units": 14}, {"type": "sigmoid"}], (4,)), seed=0)
    with pytest.raises(TrainingError) as err:
        train(model, _toy_sets(rng), _toy_sets(rng), TrainConfig(max_epochs=10, early_stop_patience=5, seed=0))
    assert err.value.epoch == 2


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=1e-2)
    with pytest.raises(ConfigError):
        TrainConfig(plateau_patience=30)
    with pytest.raises(ConfigError):
        TrainConfig(max_epochs=20)


def test_training_is_deterministic(rng):
    sets = _toy_sets(rng), _toy_sets(np.random.default_rng(5))
    cfg = TrainConfig(max_epochs=30, early_stop_patience=10, batch_size=8, seed=4)
    runs = [train(Model(_spec([{"type": "dense", "units": 14}, {"type": "sigmoid"}], (4,)), seed=4), *sets, cfg)[0] for _ in range(2)]
    for k, v in runs[0].named_params().items():
        assert np.array_equal(v, runs[1].named_params()[k])


# --- resources / checkpoints ---------------------------------------------------


def test_resource_report_examples():
    dense = _spec([{"type": "dense", "units": 14}], (10,))
    assert resource_report(dense)["parameter_count"] == 154
    assert resource_report(None)["parameter_count"] == 0


@pytest.mark.parametrize("factory", [tiny2d, tiny2p5d, tiny3d])
@pytest.mark.parametrize("size", [16, 64])
def test_resource_report_matches_built_model(factory, size):
    spec = factory(size)
    model = Model(spec)
    rep = resource_report(model)
    assert rep["parameter_count"] == model.param_count()
    assert rep["weight_bytes"] == 4 * model.param_count()
    assert rep["input_activation_bytes"] == 4 * int(np.prod(spec.input_shape))
    shape = tuple(spec.input_shape)
    for layer, cfg in zip(model.layers, spec.layers):
        n, shape = layer_param_formula(cfg, shape)
        assert n == layer.param_count() and shape == layer.out_shape


def test_checkpoint_round_trip(tmp_path, rng):
    model = Model(tiny2p5d(16), seed=2)
    ckpt = Checkpoint(model.spec, model.copy_params(), {"note": "x", "n": 3}, {"adam_m/0.W": rng.normal(size=(3, 16)).astype(np.float32)})
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    assert back.spec.to_json() == model.spec.to_json() and back.meta == ckpt.meta
    for k, v in ckpt.params.items():
        assert np.array_equal(back.params[k], v) and back.params[k].dtype == np.float32
    assert np.array_equal(back.extra["adam_m/0.W"], ckpt.extra["adam_m/0.W"])
    x = rng.uniform(size=(2, 1, 16, 16, 16)).astype(np.float32)
    assert np.array_equal(back.build_model().forward(x), model.forward(x))
    assert encode_checkpoint(back) == path.read_bytes()
    with pytest.raises(PreconditionError):
        decode_checkpoint(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(PreconditionError):
        decode_checkpoint(path.read_bytes()[:-8])
    with pytest.raises(PreconditionError):
        load_checkpoint(tmp_path / "missing.ckpt")
