"""``xprojct`` command line: preprocess, train, predict, evaluate, compare, benchmark, phantom."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Sequence

import numpy as np

from ._io import atomic_write_json
from .errors import ConfigError, PreconditionError, XprojError
from .labels import LabelVocabulary, SeriesPrediction, predictions_doc, validate_prediction_doc, write_predictions
from .nn import ArrayDataset, Checkpoint, Model, TrainConfig, TrainState, load_checkpoint, save_checkpoint, train
from .nn.model import PRESETS, REPRESENTATIONS
from .phantom import PhantomSpec, generate_dataset, load_manifest
from .pipeline import (
    PreprocessConfig,
    augment_transform,
    load_split,
    preprocess_file,
    represent,
    series_files,
    series_id,
    write_outputs,
)
from .stats import (
    comparison_table_json,
    format_comparison_table,
    metrics_summary,
    paired_model_comparison,
    shapiro_wilk,
    wilcoxon_signed_rank,
)

log = logging.getLogger("xprojct")

EXIT_PARTIAL = 7
SCENARIOS = ("single", "multi")


def _read_json(path, what="config") -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{what} file {path} not found")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _jobs(value: int | None, work: int) -> int:
    if value is not None and value < 1:
        raise ConfigError("--jobs must be at least 1")
    return max(1, min(work, value if value is not None else (os.cpu_count() or 1)))


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    cfg = PreprocessConfig.from_json(_read_json(args.config) if args.config else None)
    out = Path(args.out)
    result = preprocess_file(args.input, cfg, keep=args.dump_intermediates)
    dump = out.with_name(out.stem + "_intermediates") if args.dump_intermediates else None
    out.parent.mkdir(parents=True, exist_ok=True)
    write_outputs(result, out, cfg, dump)
    log.info("wrote %s (roi lower bound %g)", out, result.bounds.lower_hu)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_KEYS = {"manifest", "representation", "input_size", "augment", "preprocess", "train"}


def load_train_config(path, seed: int | None = None) -> dict:
    """Parse a training config file and fill every default, so the result is the effective config."""
    doc = _read_json(path)
    unknown = set(doc) - TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown training config keys {sorted(unknown)}")
    if "manifest" not in doc:
        raise ConfigError("training config needs a 'manifest' entry")
    rep = doc.get("representation", "2d")
    if rep not in REPRESENTATIONS:
        raise ConfigError(f"unknown representation {rep!r}; expected one of {sorted(REPRESENTATIONS)}")
    size = doc.get("input_size", 64)
    if not isinstance(size, int) or size < 8:
        raise ConfigError("input_size must be an integer >= 8")
    tdoc = dict(doc.get("train", {}))
    if seed is not None:
        tdoc["seed"] = seed
    try:
        tcfg = TrainConfig(**tdoc)
    except TypeError as exc:
        raise ConfigError(f"bad train section: {exc}") from exc
    return {
        "manifest": doc["manifest"],
        "representation": rep,
        "input_size": size,
        "augment": bool(doc.get("augment", rep == "2d")),
        "preprocess": PreprocessConfig.from_json(doc.get("preprocess")).to_json(),
        "train": tcfg.to_json(),
    }


def _state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    st = ckpt.meta.get("train_state")
    if st is None:
        raise PreconditionError("checkpoint carries no training state to resume from")
    m = {k[len("adam_m/"):]: v for k, v in ckpt.extra.items() if k.startswith("adam_m/")}
    v = {k[len("adam_v/"):]: v for k, v in ckpt.extra.items() if k.startswith("adam_v/")}
    return TrainState(st["epoch"], st["lr"], st["adam_step"], m, v, st["scheduler"], st["best_val_loss"])


def run_training(cfg: dict, base_dir: Path, jobs: int = 1, resume: Checkpoint | None = None):
    rep = cfg["representation"]
    size = cfg["input_size"]
    pcfg = PreprocessConfig.from_json(cfg["preprocess"])
    tcfg = TrainConfig(**cfg["train"])
    manifest = load_manifest(base_dir / cfg["manifest"])
    cache = np.float32 if rep == "2d" else np.float16
    xtr, ytr, _ = load_split(manifest, "train", rep, pcfg, size, jobs, cache)
    xva, yva, _ = load_split(manifest, "val", rep, pcfg, size, jobs, cache)
    spec = PRESETS[REPRESENTATIONS[rep]](size, len(manifest.vocabulary))
    model = Model(spec, seed=tcfg.seed)
    state = None
    if resume is not None:
        if resume.spec.to_json() != spec.to_json():
            raise ConfigError("resume checkpoint was built for a different model")
        model.set_params(resume.params)
        state = _state_from_checkpoint(resume)
    transform = augment_transform() if cfg["augment"] and rep == "2d" else None
    model, tlog, st = train(model, ArrayDataset(xtr, ytr, transform), ArrayDataset(xva, yva), tcfg, resume=state)
    meta = {
        "representation": rep,
        "input_size": size,
        "preprocess": pcfg.to_json(),
        "vocabulary": list(manifest.vocabulary),
        "train_config": tcfg.to_json(),
        "train_state": {
            "epoch": st.epoch,
            "lr": st.lr,
            "adam_step": st.adam_step,
            "scheduler": st.scheduler,
            "best_val_loss": st.best_val_loss,
            "best_epoch": tlog.best_epoch,
        },
    }
    extra = {f"adam_m/{k}": v for k, v in st.adam_m.items()}
    extra.update({f"adam_v/{k}": v for k, v in st.adam_v.items()})
    return Checkpoint(spec, model.copy_params(), meta, extra), tlog


def cmd_train(args) -> int:
    cfg = load_train_config(args.config, args.seed)
    base = Path(args.config).resolve().parent
    out = Path(args.out)
    resume = load_checkpoint(args.resume) if args.resume else None
    n_jobs = _jobs(args.jobs, 1 << 16)
    ckpt, tlog = run_training(cfg, base, n_jobs, resume)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", ckpt)
    doc = tlog.to_json()
    doc["config"] = cfg
    atomic_write_json(out / "train_log.json", doc)
    log.info("best epoch %d (val loss %.5f), stopped at %d", tlog.best_epoch, tlog.best_val_loss, tlog.stop_epoch)
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


class Predictor:
    """Checkpoint plus the preprocessing settings it was trained with.

    Layers keep per-call caches, so inference is serialised with a lock while
    loading and preprocessing run concurrently.
    """

    def __init__(self, ckpt: Checkpoint):
        self.model = ckpt.build_model()
        meta = ckpt.meta
        try:
            self.representation = meta["representation"]
            self.size = int(meta["input_size"])
            self.vocab = LabelVocabulary(meta["vocabulary"])
        except KeyError as exc:
            raise PreconditionError(f"checkpoint metadata lacks {exc}") from exc
        self.preprocess = PreprocessConfig.from_json(meta.get("preprocess"))
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path) -> "Predictor":
        return cls(load_checkpoint(path))

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        with self._lock:
            return self.model.forward(x[None])[0].astype(np.float64)

    def predict_series(self, case_id: str, path) -> SeriesPrediction:
        t0 = time.perf_counter()
        sid = series_id(path)
        try:
            x = represent(preprocess_file(path, self.preprocess), self.representation, self.size)
            probs = np.clip(self.probabilities(x), 0.0, 1.0)
            rec = SeriesPrediction(case_id, sid, probs.tolist())
            json.dumps(rec.to_json(self.vocab))
        except XprojError as exc:
            log.error("series %s failed: %s", sid, exc)
            rec = SeriesPrediction(case_id, sid, [], error=f"{type(exc).__name__}: {exc}")
        rec.elapsed_ms = (time.perf_counter() - t0) * 1000.0
        return rec

    def predict_case(self, case_dir, scenario: str = "multi", jobs: int | None = None) -> List[SeriesPrediction]:
        if scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {scenario!r}")
        files = series_files(case_dir)
        if not files:
            raise PreconditionError(f"no NIFTI series in {case_dir}")
        if scenario == "single" and len(files) != 1:
            raise PreconditionError(f"single-series scenario but {len(files)} series in {case_dir}")
        case_id = Path(case_dir).name
        n = _jobs(jobs, len(files))
        if n == 1:
            return [self.predict_series(case_id, f) for f in files]
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(lambda f: self.predict_series(case_id, f), files))


def predict_to_file(predictor: Predictor, case_dir, out, scenario="multi", jobs=None) -> tuple:
    records = predictor.predict_case(case_dir, scenario, jobs)
    doc = write_predictions(records, out, predictor.vocab)
    return doc, sum(r.error is not None for r in records)


def cmd_predict(args) -> int:
    predictor = Predictor.load(args.checkpoint)
    _, failed = predict_to_file(predictor, args.case_dir, args.out, args.scenario, args.jobs)
    if failed:
        log.warning("%d series failed", failed)
        return EXIT_PARTIAL
    return 0


# ---------------------------------------------------------------------------
# evaluate / compare
# ---------------------------------------------------------------------------


def predict_split(predictor: Predictor, manifest, split: str, jobs: int = 1) -> tuple:
    x, y, ids = load_split(manifest, split, predictor.representation, predictor.preprocess, predictor.size, jobs)
    return predictor.model.predict(x).astype(np.float64), y, ids


def cmd_evaluate(args) -> int:
    predictor = Predictor.load(args.checkpoint)
    manifest = load_manifest(args.manifest)
    probs, truth, _ = predict_split(predictor, manifest, args.split, _jobs(args.jobs, 1 << 16))
    report = metrics_summary(probs, truth, names=predictor.vocab.names)
    print(report.format_table())
    if args.out:
        atomic_write_json(args.out, report.to_json())
    return 0


def cmd_compare(args) -> int:
    a, b = (Predictor.load(p) for p in args.checkpoints)
    if a.vocab != b.vocab:
        raise PreconditionError("checkpoints use different region vocabularies")
    manifest = load_manifest(args.manifest)
    jobs = _jobs(args.jobs, 1 << 16)
    pa, truth, ids_a = predict_split(a, manifest, args.split, jobs)
    pb, _, ids_b = predict_split(b, manifest, args.split, jobs)
    rows = paired_model_comparison(pa, pb, truth, names=a.vocab.names)
    print(format_comparison_table(rows))
    if args.out:
        atomic_write_json(args.out, {"split": args.split, "n_samples": len(ids_a), "classes": comparison_table_json(rows)})
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def _population_std(values: Sequence[float]) -> float:
    return float(np.std(np.asarray(values, dtype=np.float64)))


def run_benchmark(checkpoints: Sequence[str], cases: Sequence[str], repeats: int = 5, scenario: str = "multi",
                  jobs: int | None = None, workdir=None) -> dict:
    """Time full case predictions ``repeats`` times per case and model.

    Every run writes and re-validates its prediction JSON. Paired
    normality and signed-rank tests compare the first model against each
    other one when at least six cases are available.
    """
    if repeats < 1:
        raise ConfigError("--repeats must be at least 1")
    if not cases:
        raise PreconditionError("benchmark needs at least one case")
    predictors = [Predictor.load(c) for c in checkpoints]
    models = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        for ckpt, predictor in zip(checkpoints, predictors):
            per_case = []
            for case in cases:
                times = []
                for r in range(repeats):
                    out = Path(tmp) / f"pred_{r}.json"
                    t0 = time.perf_counter()
                    doc, _ = predict_to_file(predictor, case, out, scenario, jobs)
                    times.append((time.perf_counter() - t0) * 1000.0)
                    validate_prediction_doc(json.loads(out.read_text()), predictor.vocab)
                per_case.append({"case_id": Path(case).name, "times_ms": times, "mean_ms": float(np.mean(times))})
            means = [c["mean_ms"] for c in per_case]
            models.append({
                "checkpoint": str(ckpt),
                "cases": per_case,
                "mean_ms": float(np.mean(means)),
                "std_ms": _population_std(means),
            })
    report = {"scenario": "single-series" if scenario == "single" else "multi-series", "repeats": repeats,
              "models": models, "paired": []}
    if len(models) >= 2 and len(cases) >= 6:
        base = np.array([c["mean_ms"] for c in models[0]["cases"]])
        for other in models[1:]:
            t = np.array([c["mean_ms"] for c in other["cases"]])
            entry = {"a": models[0]["checkpoint"], "b": other["checkpoint"]}
            try:
                sw = shapiro_wilk(base - t)
                entry["shapiro"] = {"W": sw.W, "p_value": sw.p_value}
            except XprojError as exc:
                entry["shapiro"] = {"error": str(exc)}
            try:
                w = wilcoxon_signed_rank(base, t)
                entry["wilcoxon"] = {"n": w.n_effective, "statistic": w.statistic, "z": w.z,
                                     "p_value": w.p_value, "method": w.method}
            except XprojError as exc:
                entry["wilcoxon"] = {"error": str(exc)}
            report["paired"].append(entry)
    return report


def format_benchmark(report: dict) -> str:
    lines = [f"scenario: {report['scenario']}, repeats: {report['repeats']}"]
    for m in report["models"]:
        lines.append(f"{m['checkpoint']}: {m['mean_ms']:.1f} ± {m['std_ms']:.1f} ms over {len(m['cases'])} cases")
    for p in report["paired"]:
        w = p.get("wilcoxon", {})
        if "p_value" in w:
            lines.append(f"wilcoxon {p['a']} vs {p['b']}: z={w['z']:.3f} p={w['p_value']:.4g}")
    return "\n".join(lines)


def cmd_benchmark(args) -> int:
    report = run_benchmark(args.checkpoints, args.cases, args.repeats, args.scenario, args.jobs)
    print(format_benchmark(report))
    if args.out:
        atomic_write_json(args.out, report)
    return 0


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    spec = PhantomSpec.from_json(_read_json(args.config)) if args.config else PhantomSpec()
    manifest = generate_dataset(spec, args.n_full, args.n_patches, args.seed, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} samples to {args.out}: {counts}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xprojct", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="run the six preprocessing steps on one NIFTI file")
    p.add_argument("input")
    p.add_argument("--out", required=True, help="preview image (.png or .pgm)")
    p.add_argument("--config")
    p.add_argument("--dump-intermediates", action="store_true")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model described by a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory for model.ckpt and train_log.json")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict every series of a case directory")
    p.add_argument("case_dir")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenario", choices=SCENARIOS, default="multi")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-class metrics of a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="per-class McNemar tests between two checkpoints")
    p.add_argument("checkpoints", nargs=2)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("benchmark", help="repeated timed predictions over cases")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--cases", nargs="+", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--scenario", choices=SCENARIOS, default="multi")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("phantom", help="generate a synthetic labelled dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-full", type=int, default=100)
    p.add_argument("--n-patches", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="phantom spec JSON")
    p.set_defaults(func=cmd_phantom)
    return parser


def configure_logging() -> None:
    level = os.environ.get("XPROJCT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except XprojError as exc:
        print(f"xprojct {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
