"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line."""
from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest

import xprojct.cli as cli
from xprojct.cli import Predictor, main, predict_split, run_benchmark
from xprojct.nifti_io import read_nifti, write_nifti
from xprojct.nn import Checkpoint, Model, grad_check, load_checkpoint, resource_report, save_checkpoint
from xprojct.nn import tiny2d, tiny2p5d, tiny3d
from xprojct.phantom import PhantomSpec, generate_phantom, load_manifest
from xprojct.projection import ProjectionImage, letterbox, minmax_normalize, project_coronal
from xprojct.roi import IntensityHistogram, detect_roi_bounds
from xprojct.stats import (
    mcnemar,
    metrics_summary,
    paired_model_comparison,
    shapiro_wilk,
    wilcoxon_signed_rank,
    z_to_p_two_sided,
)
from xprojct.volume import CtVolume, ResampleConfig, clip_hu, reorient, resample_isotropic, standardize_coronal

from conftest import literal_roi_oracle, triple_loop_sum
from test_nn import GRAD_CASES, _targets
from test_volume import ALL_CODES


def _verdict(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


# ---------------------------------------------------------------- 1


def test_criterion_1_projection_oracle(capsys):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 17, size=3))
        vox = rng.uniform(-1024, 1500, size=shape).astype(np.float32)
        got = project_coronal(CtVolume(vox, axes="IPL")).pixels
        mismatches += not (got.dtype == np.float64 and np.array_equal(got, triple_loop_sum(vox, 1)))
    elapsed = time.perf_counter() - t0
    _verdict(capsys, 1, mismatches == 0 and elapsed < 5.0,
             f"{100 - mismatches}/100 bitwise equal, {elapsed:.2f} s")


# ---------------------------------------------------------------- 2


def test_criterion_2_preprocessing_invariants(capsys):
    rng = np.random.default_rng(202)
    checks = {}

    vol = CtVolume(rng.uniform(-3000, 3000, size=(6, 7, 8)).astype(np.float32))
    once = clip_hu(vol)
    checks["clip idempotent"] = np.array_equal(clip_hu(once).voxels, once.voxels)

    ok = True
    for _ in range(20):
        img = minmax_normalize(ProjectionImage(rng.normal(size=(9, 11)) * rng.uniform(0.1, 1e4)))
        ok &= img.pixels.min() == 0.0 and img.pixels.max() == 1.0
    checks["normalisation bounds"] = ok

    a = rng.uniform(0.1, 1.0, size=(48, 32))
    boxed = letterbox(a, (48, 48))
    checks["letterbox zero padding"] = (
        np.array_equal(boxed[:, 8:40], a) and not boxed[:, :8].any() and not boxed[:, 40:].any()
    )

    ok = True
    for code in ALL_CODES:
        v = CtVolume(rng.uniform(size=(2, 3, 4)).astype(np.float32), axes=code)
        back = reorient(standardize_coronal(v), code)
        ok &= np.array_equal(back.voxels, v.voxels) and back.axes == code
    checks["orientation round trip (48 codes)"] = ok

    const = CtVolume(np.full((6, 5, 4), 70.0, np.float32), (0.7, 2.5, 1.3))
    checks["constant field exact"] = bool(np.all(resample_isotropic(const, ResampleConfig(0.5)).voxels == 70.0))

    n = 12
    ramp = np.broadcast_to(np.arange(n, dtype=np.float32)[None, None, :], (4, 5, n)).copy()
    out = resample_isotropic(CtVolume(ramp, (1.0, 1.0, 1.0)), ResampleConfig(0.5)).voxels
    x = (np.arange(2 * n) + 0.5) * 0.5 - 0.5
    inner = (x >= 0) & (x <= n - 1)
    err = float(np.max(np.abs(out[..., inner] - x[inner])))
    checks["linear field error < 1e-5"] = err < 1e-5

    failed = [k for k, v in checks.items() if not v]
    _verdict(capsys, 2, not failed, f"{len(checks) - len(failed)}/{len(checks)} green, linear err {err:.1e}"
             + (f", failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 3


def _constructed_histograms(rng):
    edges = np.linspace(-1024, 1500, 251)
    centers = 0.5 * (edges[:-1] + edges[1:])
    cases = [np.full(250, 17, dtype=np.int64)]  # uniform window: fallback
    for i in range(19):
        counts = rng.integers(0, 30, size=250)
        counts[:60] += rng.integers(1000, 5000)  # air peak
        peak = rng.integers(90, 110)
        counts[peak - 3:peak + 3] += rng.integers(2000, 8000)  # soft-tissue peak
        tail_end = int(rng.integers(peak + 3, 141)) if i % 5 else peak + 2
        counts[peak + 3:tail_end + 1] += rng.integers(40, 200)  # bone-side tail of known extent
        cases.append(counts)
    return edges, centers, cases


def test_criterion_3_histogram_roi(capsys):
    edges, centers, cases = _constructed_histograms(np.random.default_rng(303))
    agree = 0
    fallbacks = 0
    for counts in cases:
        b = detect_roi_bounds(IntensityHistogram(edges, counts))
        lower, fb = literal_roi_oracle(counts, centers)
        agree += b.lower_hu == pytest.approx(lower) and b.fallback == fb
        fallbacks += b.fallback and b.lower_hu == -400.0
    _verdict(capsys, 3, agree == 20 and fallbacks >= 1, f"{agree}/20 match the oracle, {fallbacks} fallback at -400")


# ---------------------------------------------------------------- 4


def test_criterion_4_gradient_checks(capsys):
    t0 = time.perf_counter()
    errors = {}
    ok = True
    for name, (spec, tol) in GRAD_CASES.items():
        rng = np.random.default_rng(7)
        model = Model(spec, seed=3)
        if name == "shrink2p5d":
            model.layers[0].params["W"] = rng.uniform(-1, 1, size=(3, 5)).astype(np.float32)
        x = rng.uniform(-1, 1, size=(2,) + tuple(spec.input_shape))
        errors[name] = grad_check(model, x, _targets(rng, 2))["max_rel_error"]
        ok &= errors[name] < tol
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    _verdict(capsys, 4, ok and elapsed < 60.0, f"{detail}; {elapsed:.1f} s")


# ---------------------------------------------------------------- 5

STUDY_REPS = {
    "2d": {"max_epochs": 50, "batch_size": 8, "seed": 0},
    "2.5d": {"max_epochs": 20, "batch_size": 8, "seed": 0, "early_stop_patience": 8},
    "3d": {"max_epochs": 12, "batch_size": 8, "seed": 0, "early_stop_patience": 8},
}


def _table(rows) -> str:
    lines = [f"{'approach':<10}{'accuracy':>18}{'precision':>18}{'recall':>18}{'F1':>18}"]
    for name, rep in rows:
        s = rep.summary
        cells = "".join(f"{s[k]['mean']:>10.3f} ± {s[k]['std']:.3f}" for k in ("accuracy", "precision", "recall", "f1"))
        lines.append(f"{name:<10}{cells}")
    return "\n".join(lines)


def _mcnemar_grid(vocab, probs, truth) -> str:
    pairs = [("2d", "2.5d"), ("2d", "3d"), ("2.5d", "3d")]
    header = f"{'region':<14}" + "".join(f"{a + ' vs ' + b:>14}" for a, b in pairs)
    cols = [paired_model_comparison(probs[a], probs[b], truth, names=vocab) for a, b in pairs]
    lines = [header]
    for i, region in enumerate(vocab):
        cells = []
        for rows in cols:
            res = rows[i]["result"]
            cells.append(f"{'n/d':>14}" if res is None else f"{res.p_value:>14.3g}")
        lines.append(f"{region:<14}" + "".join(cells))
    return "\n".join(lines)


@pytest.mark.slow
def test_criterion_5_phantom_study(tmp_path, capsys):
    root = tmp_path
    assert main(["phantom", "--out", str(root / "data"), "--n-full", "600", "--n-patches", "600", "--seed", "0"]) == 0
    manifest = load_manifest(root / "data" / "manifest.json")
    vocab = list(manifest.vocabulary)
    reports, probs, logs, seconds = {}, {}, {}, {}
    truth = None
    for rep, train_cfg in STUDY_REPS.items():
        cfg = {
            "manifest": "data/manifest.json",
            "representation": rep,
            "input_size": 64,
            "augment": False,
            "preprocess": {"target_spacing_mm": 2.5, "image_size": 64},
            "train": train_cfg,
        }
        (root / f"{rep}.json").write_text(json.dumps(cfg))
        t0 = time.perf_counter()
        assert main(["train", "--config", str(root / f"{rep}.json"), "--out", str(root / rep)]) == 0
        seconds[rep] = time.perf_counter() - t0
        logs[rep] = json.loads((root / rep / "train_log.json").read_text())
        p, truth, _ = predict_split(Predictor.load(root / rep / "model.ckpt"), manifest, "test")
        probs[rep] = p
        reports[rep] = metrics_summary(p, truth, names=vocab)

    f1 = reports["2d"].summary["f1"]["mean"]
    epochs = logs["2d"]["stop_epoch"]
    with capsys.disabled():
        print(f"\nphantom study: {len(truth)} test samples")
        print(_table([(r, reports[r]) for r in STUDY_REPS]))
        for r in STUDY_REPS:
            print(f"{r}: stop epoch {logs[r]['stop_epoch']}, best epoch {logs[r]['best_epoch']}, {seconds[r] / 60:.1f} min")
        print(_mcnemar_grid(vocab, probs, truth))
    ok = f1 >= 0.95 and epochs <= 50 and seconds["2d"] <= 1800
    _verdict(capsys, 5, ok, f"tiny2d macro-F1 {f1:.3f} after {epochs} epochs in {seconds['2d'] / 60:.1f} min")


# ---------------------------------------------------------------- 6

PUBLISHED_PAIRS = [(-2.190, 0.0285), (-1.080, 0.280), (-3.589, 3.4e-4), (-2.437, 0.015), (-0.648, 0.516)]


def test_criterion_6_published_z_to_p(capsys):
    deltas = [abs(z_to_p_two_sided(z) - p) for z, p in PUBLISHED_PAIRS]
    _verdict(capsys, 6, max(deltas) <= 0.002, f"max |dp| {max(deltas):.5f} over 5 pairs")


# ---------------------------------------------------------------- 7


def test_criterion_7_statistics_oracles(capsys):
    # two-sided binomial sum over the smaller count, b + c = 20
    oracle = min(1.0, 2 * sum(math.comb(20, i) for i in range(6)) / 2**20)
    checks = {
        "mcnemar (5, 15)": abs(mcnemar(5, 15).p_value - 0.0414) <= 1e-4 and abs(mcnemar(5, 15).p_value - oracle) < 1e-12,
        "wilcoxon n=3": wilcoxon_signed_rank([1.0, 2.0, 3.0]).p_value == 0.25,
        "shapiro AP n=3": abs(shapiro_wilk([1.0, 2.0, 3.0]).W - 1.0) <= 1e-9,
        "shapiro normal": shapiro_wilk(np.random.default_rng(0).normal(size=200)).p_value > 0.05,
        "shapiro uniform": shapiro_wilk(np.random.default_rng(0).uniform(size=200)).p_value < 0.05,
    }
    failed = [k for k, v in checks.items() if not v]
    _verdict(capsys, 7, not failed, f"{len(checks) - len(failed)}/{len(checks)} oracles"
             + (f", failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 8


def _closed_form(spec) -> int:
    """Parameter count of a preset from its conv/dense widths, written out by hand."""
    total = 0
    shape = tuple(spec.input_shape)
    channels = shape[0]
    for layer in spec.layers:
        kind = layer["type"]
        if kind in ("conv2d", "conv3d"):
            nd = 2 if kind == "conv2d" else 3
            out = layer["out_channels"]
            total += channels * out * layer["kernel"] ** nd + out
            channels = out
        elif kind == "shrink2p5d":
            total += 3 * shape[1] + 3
            channels = 3
        elif kind == "dense":
            total += channels * layer["units"] + layer["units"]
            channels = layer["units"]
    return total


def test_criterion_8_resource_accounting(capsys):
    counts = {}
    ok = True
    for factory in (tiny2d, tiny2p5d, tiny3d):
        for size in (64, 224):
            spec = factory(size)
            n = resource_report(spec)["parameter_count"]
            ok &= n == _closed_form(spec)
            counts[f"{spec.name}@{size}"] = n
    ok &= counts["tiny2d@64"] == 3 * 16 * 9 + 16 + 16 * 32 * 9 + 32 + 32 * 64 * 9 + 64 + 64 * 64 * 9 + 64 + 64 * 14 + 14
    ok &= counts["tiny2p5d@64"] == counts["tiny2d@64"] + 3 * 64 + 3
    ok &= counts["tiny3d@64"] == 1 * 16 * 27 + 16 + 16 * 32 * 27 + 32 + 32 * 54 * 27 + 54 + 54 * 14 + 14
    in2d = resource_report(tiny2d(224))["input_activation_bytes"]
    in3d = resource_report(tiny3d(224))["input_activation_bytes"]
    ok &= in2d == 3 * 224 * 224 * 4 == 602_112
    ok &= in3d == 224 ** 3 * 4 == 44_957_696
    ok &= in3d > in2d
    # a built model agrees with the ModelSpec-only accounting
    ok &= resource_report(Model(tiny2p5d(224)))["parameter_count"] == counts["tiny2p5d@224"]
    detail = ", ".join(f"{k} {v}" for k, v in counts.items() if k.endswith("@64"))
    _verdict(capsys, 8, ok, f"{detail}; inputs 2d {in2d} B, 3d {in3d} B ({in3d / in2d:.1f}x)")


# ---------------------------------------------------------------- 9


def test_criterion_9_determinism(tmp_path, capsys):
    spec = PhantomSpec(shape=(40, 20, 30), spacing=(6.0, 4.0, 4.0))
    (tmp_path / "phantom.json").write_text(json.dumps(spec.to_json()))
    assert main(["phantom", "--out", str(tmp_path / "data"), "--n-full", "20", "--n-patches", "20", "--seed", "5",
                 "--config", str(tmp_path / "phantom.json")]) == 0
    cfg = {
        "manifest": "data/manifest.json",
        "representation": "2d",
        "input_size": 32,
        "augment": True,
        "preprocess": {"target_spacing_mm": 4.0},
        "train": {"max_epochs": 5, "batch_size": 4, "seed": 9, "plateau_patience": 1, "early_stop_patience": 3},
    }
    (tmp_path / "train.json").write_text(json.dumps(cfg))
    ckpts = []
    for run in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "train.json"), "--out", str(tmp_path / run)]) == 0
        ckpts.append((tmp_path / run / "model.ckpt").read_bytes())
    same_ckpt = ckpts[0] == ckpts[1]

    src = tmp_path / "data" / load_manifest(tmp_path / "data" / "manifest.json").entries[0].path
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / f"pre_{run}"
        assert main(["preprocess", str(src), "--out", str(out / "p.png"), "--dump-intermediates"]) == 0
        outputs.append({p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()})
    same_pre = outputs[0] == outputs[1] and len(outputs[0]) > 1
    _verdict(capsys, 9, same_ckpt and same_pre,
             f"checkpoints identical: {same_ckpt}, {len(outputs[0])} preprocess outputs identical: {same_pre}")


# ---------------------------------------------------------------- 10


def test_criterion_10_round_trips(tmp_path, capsys, monkeypatch):
    rng = np.random.default_rng(1010)
    nifti_ok = True
    for suffix in (".nii", ".nii.gz"):
        for axes in ("IPL", "LPS", "RAS"):
            vol = CtVolume(rng.uniform(-1024, 1500, size=(5, 6, 7)).astype(np.float32), (0.75, 1.5, 2.0), axes)
            path = tmp_path / f"v_{axes}{suffix}"
            write_nifti(vol, path)
            back, _ = read_nifti(path)
            nifti_ok &= np.array_equal(back.voxels, vol.voxels) and back.axes == axes and back.spacing == vol.spacing
        ints = CtVolume(rng.integers(-1024, 1500, size=(4, 4, 4)).astype(np.float32), (1.0, 1.0, 1.0), "IPL")
        write_nifti(ints, tmp_path / f"i{suffix}", datatype="int16")
        nifti_ok &= np.array_equal(read_nifti(tmp_path / f"i{suffix}")[0].voxels, ints.voxels)

    model = Model(tiny2d(32), seed=4)
    ckpt = Checkpoint(model.spec, model.copy_params(), {"representation": "2d", "input_size": 32,
                                                        "vocabulary": list(PhantomSpec().vocab)})
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "m.ckpt")
    ckpt_ok = back.meta == ckpt.meta and all(np.array_equal(back.params[k], v) for k, v in ckpt.params.items())
    x = rng.uniform(size=(2, 3, 32, 32)).astype(np.float32)
    ckpt_ok &= np.array_equal(back.build_model().forward(x), model.forward(x))

    spec = PhantomSpec(shape=(40, 20, 30), spacing=(6.0, 4.0, 4.0))
    cases = []
    for i in range(2):
        case = tmp_path / f"case{i}"
        case.mkdir()
        for s in range(2):
            vol, _ = generate_phantom(spec, ["chest", "spine", "abdomen"], rng)
            write_nifti(vol, case / f"series_{s}.nii.gz")
        cases.append(str(case))
    validated = []
    real = cli.validate_prediction_doc

    def counting(doc, vocab=None):
        real(doc, vocab) if vocab is not None else real(doc)
        validated.append(len(doc["series"]))

    monkeypatch.setattr(cli, "validate_prediction_doc", counting)
    report = run_benchmark([str(tmp_path / "m.ckpt")], cases, repeats=3, workdir=tmp_path)
    runs = len(cases) * 3
    schema_ok = len(validated) == runs and all(n == 2 for n in validated) and len(report["models"]) == 1
    _verdict(capsys, 10, nifti_ok and ckpt_ok and schema_ok,
             f"NIFTI exact: {nifti_ok}, checkpoint exact: {ckpt_ok}, {len(validated)}/{runs} benchmark JSONs validated")
