"""Preprocessing chain, model-input representations and dataset loading."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from ._io import atomic_write_bytes, atomic_write_json
from .errors import ConfigError, PreconditionError, StageError, XprojError
from .labels import LabelVocabulary
from .nifti_io import read_nifti, write_nifti
from .phantom import DatasetManifest
from .projection import (
    AugmentParams,
    ProjectionImage,
    augment,
    letterbox,
    minmax_normalize,
    normalize_array,
    project_coronal,
    resize_letterbox,
    save_preview,
)
from .roi import RoiBounds, RoiSearchWindow, apply_roi, compute_histogram, detect_roi_bounds, roi_debug
from .volume import HU_MAX, HU_MIN, CtVolume, ResampleConfig, clip_hu, resample_isotropic, standardize_coronal

log = logging.getLogger(__name__)

STAGES = ("resample", "clip", "reorient", "roi", "project", "normalize")
REPRESENTATION_KEYS = ("2d", "2.5d", "3d")


@dataclass
class PreprocessConfig:
    target_spacing_mm: float = 0.5
    max_output_voxels: int = 1_500_000_000
    hu_min: float = HU_MIN
    hu_max: float = HU_MAX
    roi_lower_min: float = -400.0
    roi_lower_max: float = 400.0
    image_size: int = 224

    def __post_init__(self):
        if self.target_spacing_mm <= 0:
            raise ConfigError("target_spacing_mm must be positive")
        if self.hu_min >= self.hu_max:
            raise ConfigError("hu_min must be below hu_max")
        if self.image_size < 1:
            raise ConfigError("image_size must be positive")
        self.window  # validates ordering

    @property
    def window(self) -> RoiSearchWindow:
        return RoiSearchWindow(self.roi_lower_min, self.roi_lower_max, self.hu_max)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict | None) -> "PreprocessConfig":
        try:
            return cls(**(doc or {}))
        except TypeError as exc:
            raise ConfigError(f"bad preprocess config: {exc}") from exc


@dataclass
class PreprocessResult:
    canonical: CtVolume  # after ROI masking, canonical axes
    bounds: RoiBounds
    projection: ProjectionImage  # raw sums
    normalized: ProjectionImage
    intermediates: Dict[str, object] = field(default_factory=dict)


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except StageError:
        raise
    except (XprojError, ValueError, FloatingPointError, MemoryError) as exc:
        raise StageError(name, exc) from exc


def preprocess_volume(vol: CtVolume, cfg: PreprocessConfig | None = None, keep: bool = False) -> PreprocessResult:
    """Resample, clip, reorient, mask to the bone ROI, project and normalise."""
    cfg = cfg or PreprocessConfig()
    inter: Dict[str, object] = {}
    res = _stage("resample", resample_isotropic, vol, ResampleConfig(cfg.target_spacing_mm, cfg.max_output_voxels))
    if keep:
        inter["resampled"] = res
    clipped = _stage("clip", clip_hu, res, cfg.hu_min, cfg.hu_max)
    canon = _stage("reorient", standardize_coronal, clipped)

    def roi_step(v):
        hist = compute_histogram(v, lo=cfg.hu_min, hi=cfg.hu_max)
        bounds = detect_roi_bounds(hist, cfg.window)
        return hist, bounds, apply_roi(v, bounds)

    hist, bounds, masked = _stage("roi", roi_step, canon)
    if bounds.fallback:
        log.warning("ROI search found no tail in the window; using lower bound %g", bounds.lower_hu)
    if keep:
        inter["roi"] = roi_debug(hist, cfg.window, bounds)
    proj = _stage("project", project_coronal, masked)
    norm = _stage("normalize", minmax_normalize, proj)
    return PreprocessResult(masked, bounds, proj, norm, inter)


def preprocess_file(path, cfg: PreprocessConfig | None = None, keep: bool = False) -> PreprocessResult:
    vol, _ = read_nifti(path)
    return preprocess_volume(vol, cfg, keep)


def write_outputs(result: PreprocessResult, out_path, cfg: PreprocessConfig, dump_dir=None) -> None:
    """Letterboxed preview image, plus optional intermediate dumps."""
    out_path = Path(out_path)
    save_preview(resize_letterbox(result.normalized, cfg.image_size, cfg.image_size), out_path)
    if dump_dir is None:
        return
    dump = Path(dump_dir)
    dump.mkdir(parents=True, exist_ok=True)
    if "resampled" in result.intermediates:
        write_nifti(result.intermediates["resampled"], dump / "resampled.nii.gz")
    if "roi" in result.intermediates:
        atomic_write_json(dump / "roi.json", result.intermediates["roi"])
    atomic_write_bytes(dump / "projection_raw.f64", np.ascontiguousarray(result.projection.pixels, dtype="<f8").tobytes())
    atomic_write_json(dump / "projection_raw.json", {"shape": list(result.projection.pixels.shape), "dtype": "<f8"})


def represent(result: PreprocessResult, representation: str, size: int) -> np.ndarray:
    """Model input for one series.

    ``2d``: letterboxed normalised projection replicated to 3 channels.
    ``2.5d``/``3d``: min-max normalised ROI volume letterboxed into a cube.
    """
    if representation == "2d":
        img = letterbox(result.normalized.pixels, (size, size))
        return np.repeat(img[None], 3, axis=0).astype(np.float32)
    if representation in ("2.5d", "3d"):
        cube = letterbox(normalize_array(result.canonical.voxels), (size, size, size))
        return cube[None].astype(np.float32)
    raise ConfigError(f"unknown representation {representation!r}; expected one of {REPRESENTATION_KEYS}")


def augment_transform(params: AugmentParams | None = None):
    params = params or AugmentParams()

    def fn(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return augment(ProjectionImage(np.asarray(x, dtype=np.float64)), params, rng).pixels.astype(np.float32)

    return fn


def _load_one(path, cfg, representation, size):
    return represent(preprocess_file(path, cfg), representation, size)


def load_split(
    manifest: DatasetManifest,
    split: str,
    representation: str,
    cfg: PreprocessConfig,
    size: int,
    jobs: int = 1,
    cache_dtype=np.float32,
) -> tuple:
    """Preprocess every sample of a split; returns ``(x, y, sample_ids)``."""
    entries = manifest.split(split)
    if not entries:
        raise PreconditionError(f"split {split!r} is empty")
    vocab = LabelVocabulary(manifest.vocabulary)
    paths = [manifest.resolve(e.path) for e in entries]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            arrays = list(pool.map(lambda p: _load_one(p, cfg, representation, size), paths))
    else:
        arrays = [_load_one(p, cfg, representation, size) for p in paths]
    x = np.stack(arrays).astype(cache_dtype)
    y = np.array([vocab.encode(e.regions) for e in entries], dtype=np.float32)
    return x, y, [e.sample_id for e in entries]


def series_files(case_dir) -> List[Path]:
    case = Path(case_dir)
    if not case.is_dir():
        raise PreconditionError(f"case directory {case} does not exist")
    files = [p for p in case.iterdir() if p.is_file() and (p.name.endswith(".nii") or p.name.endswith(".nii.gz"))]
    return sorted(files, key=series_id)


def series_id(path) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name
