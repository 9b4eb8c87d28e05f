"""Synthetic labelled CT phantoms.

A soft-tissue body in air carries one bone-like primitive group per region,
each at its own canonical position so the coronal projection keeps regions
apart. Full-body samples include a contiguous head-to-foot range of regions;
patch samples are random crops around one region, relabelled by how much of
each region's bone survives the crop.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ._io import atomic_write_json
from .errors import ConfigError, PreconditionError
from .labels import DEFAULT_VOCABULARY, LabelFile, LabelVocabulary, read_labels, write_labels
from .nifti_io import write_nifti
from .volume import CANONICAL_AXES, HU_MAX, HU_MIN, CtVolume, reorient

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")

# (family, cz, cy, cx, rz, ry, rx) in normalised canonical coordinates:
# z head->feet, y anterior->posterior, x patient right->left
_L, _R = 0.35, 0.65
DEFAULT_RECIPES: Dict[str, List[tuple]] = {
    "head": [("ellipsoid", 0.07, 0.5, 0.5, 0.065, 0.22, 0.12)],
    "neck": [("tube_z", 0.16, 0.62, 0.5, 0.03, 0.08, 0.05)],
    "shoulder": [("tube_x", 0.215, 0.45, 0.30, 0.022, 0.06, 0.13), ("tube_x", 0.215, 0.45, 0.70, 0.022, 0.06, 0.13)],
    "chest": [("shell", 0.32, 0.5, 0.5, 0.085, 0.36, 0.20)],
    "spine": [("box", 0.465, 0.75, 0.5, 0.055, 0.10, 0.06)],
    "upper_arm": [("tube_z", 0.32, 0.5, 0.08, 0.08, 0.07, 0.05), ("tube_z", 0.32, 0.5, 0.92, 0.08, 0.07, 0.05)],
    "forearm_hand": [("tube_z", 0.47, 0.5, 0.08, 0.055, 0.06, 0.03), ("box", 0.56, 0.45, 0.08, 0.035, 0.10, 0.065),
                     ("tube_z", 0.47, 0.5, 0.92, 0.055, 0.06, 0.03), ("box", 0.56, 0.45, 0.92, 0.035, 0.10, 0.065)],
    "abdomen": [("ellipsoid", 0.455, 0.35, 0.30, 0.045, 0.08, 0.04), ("ellipsoid", 0.455, 0.35, 0.70, 0.045, 0.08, 0.04)],
    "pelvis": [("shell", 0.545, 0.5, 0.5, 0.045, 0.30, 0.24)],
    "thigh": [("tube_z", 0.665, 0.5, _L, 0.075, 0.09, 0.05), ("tube_z", 0.665, 0.5, _R, 0.075, 0.09, 0.05)],
    "patella": [("ellipsoid", 0.765, 0.22, _L, 0.02, 0.06, 0.09), ("ellipsoid", 0.765, 0.22, _R, 0.02, 0.06, 0.09)],
    "shin": [("tube_z", 0.855, 0.5, _L, 0.06, 0.08, 0.035), ("tube_z", 0.855, 0.5, _R, 0.06, 0.08, 0.035)],
    "tarsal": [("ellipsoid", 0.935, 0.55, _L, 0.025, 0.08, 0.045), ("ellipsoid", 0.935, 0.55, _R, 0.025, 0.08, 0.045)],
    "foot": [("box", 0.975, 0.3, _L - 0.05, 0.015, 0.16, 0.09), ("box", 0.975, 0.3, _R + 0.05, 0.015, 0.16, 0.09)],
}


@dataclass
class PhantomSpec:
    shape: Tuple[int, int, int] = (80, 40, 60)  # canonical z, y, x
    spacing: Tuple[float, float, float] = (3.0, 2.0, 2.0)
    bone_hu: Tuple[float, float] = (300.0, 1500.0)
    region_bone_hu: Tuple[float, float] = (700.0, 1400.0)
    soft_tissue_hu: Tuple[float, float] = (-100.0, 100.0)
    air_hu: float = -1000.0
    noise_sigma: float = 15.0
    partial_volume_sigma: float = 0.6
    size_jitter: float = 0.15
    position_jitter: float = 0.02
    storage_orientations: Tuple[str, ...] = ("LPS", "RAS", "LAS", "RPI", "IPL", "PIR")
    coverage_threshold: float = 0.25
    patch_extent: Tuple[float, float] = (0.35, 0.8)
    patch_min_voxels: int = 8
    patch_reject_band: float = 0.0
    patch_retries: int = 20
    recipes: Dict[str, List[tuple]] = field(default_factory=lambda: dict(DEFAULT_RECIPES))
    vocabulary: Tuple[str, ...] = DEFAULT_VOCABULARY.names

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        for name in ("bone_hu", "region_bone_hu", "soft_tissue_hu"):
            lo, hi = getattr(self, name)
            if not HU_MIN <= lo <= hi <= HU_MAX:
                raise ConfigError(f"{name} must lie inside [{HU_MIN}, {HU_MAX}]")
        if not self.bone_hu[0] <= self.region_bone_hu[0] <= self.region_bone_hu[1] <= self.bone_hu[1]:
            raise ConfigError("region_bone_hu must sit inside bone_hu")
        if not HU_MIN <= self.air_hu <= HU_MAX:
            raise ConfigError("air_hu outside the clipped HU range")
        try:
            vocab = LabelVocabulary(self.vocabulary)
        except PreconditionError as exc:
            raise ConfigError(f"bad phantom vocabulary: {exc}") from exc
        missing = [r for r in vocab if r not in self.recipes]
        if missing:
            raise ConfigError(f"no primitive recipe for regions {missing}")
        if min(self.shape) < self.patch_min_voxels:
            raise ConfigError("phantom smaller than the minimum patch size")

    @property
    def vocab(self) -> LabelVocabulary:
        return LabelVocabulary(self.vocabulary)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["recipes"] = {k: [list(p) for p in v] for k, v in self.recipes.items()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "PhantomSpec":
        doc = dict(doc)
        if "recipes" in doc:
            doc["recipes"] = {k: [tuple(p) for p in v] for k, v in doc["recipes"].items()}
        for key in ("shape", "spacing", "bone_hu", "region_bone_hu", "soft_tissue_hu", "patch_extent",
                    "storage_orientations", "vocabulary"):
            if key in doc:
                doc[key] = tuple(doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"bad phantom spec: {exc}") from exc


def _grids(shape):
    return [((np.arange(n) + 0.5) / n).reshape([-1 if i == k else 1 for i in range(3)]) for k, n in enumerate(shape)]


def primitive_mask(shape, family: str, cz, cy, cx, rz, ry, rx) -> np.ndarray:
    z, y, x = _grids(shape)
    dz, dy, dx = (z - cz) / rz, (y - cy) / ry, (x - cx) / rx
    if family == "ellipsoid":
        return dz**2 + dy**2 + dx**2 <= 1.0
    if family == "shell":
        r2 = dz**2 + dy**2 + dx**2
        return (r2 <= 1.0) & (r2 >= 0.55)
    if family == "box":
        return (np.abs(dz) <= 1) & (np.abs(dy) <= 1) & (np.abs(dx) <= 1)
    if family == "tube_z":
        return (dy**2 + dx**2 <= 1.0) & (np.abs(dz) <= 1)
    if family == "tube_x":
        return (dz**2 + dy**2 <= 1.0) & (np.abs(dx) <= 1)
    raise ConfigError(f"unknown primitive family {family!r}")


def _body_mask(shape) -> np.ndarray:
    z, y, x = _grids(shape)
    torso = ((y - 0.5) / 0.42) ** 2 + ((x - 0.5) / 0.47) ** 2 <= 1.0
    return np.broadcast_to(torso & (z >= 0.0), shape)


def region_masks(spec: PhantomSpec, regions: Sequence[str], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Boolean bone masks per region, with seeded size/position jitter."""
    masks = {}
    for region in regions:
        m = np.zeros(spec.shape, dtype=bool)
        for fam, cz, cy, cx, rz, ry, rx in spec.recipes[region]:
            s = 1.0 + rng.uniform(-spec.size_jitter, spec.size_jitter)
            jz, jy, jx = rng.uniform(-spec.position_jitter, spec.position_jitter, size=3)
            # at least one voxel thick along every axis
            rz_, ry_, rx_ = (max(r * s, 0.75 / n) for r, n in zip((rz, ry, rx), spec.shape))
            m |= primitive_mask(spec.shape, fam, cz + jz, cy + jy, cx + jx, rz_, ry_, rx_)
        if not m.any():
            raise ConfigError(f"region {region!r} produced an empty mask at shape {spec.shape}")
        masks[region] = m
    return masks


def generate_phantom(spec: PhantomSpec, region_subset: Sequence[str], rng: np.random.Generator,
                     return_masks: bool = False):
    """Canonically oriented phantom containing exactly ``region_subset``."""
    regions = list(dict.fromkeys(region_subset))
    if not regions:
        raise PreconditionError("region subset must be non-empty")
    vocab = spec.vocab
    for r in regions:
        vocab.index(r)
    regions.sort(key=vocab.index)

    vol = np.full(spec.shape, spec.air_hu, dtype=np.float64)
    body = _body_mask(spec.shape)
    tissue = rng.uniform(*spec.soft_tissue_hu)
    vol[body] = tissue
    masks = region_masks(spec, regions, rng)
    for r in regions:
        vol[masks[r]] = rng.uniform(*spec.region_bone_hu)
    if spec.partial_volume_sigma > 0:
        vol = ndimage.gaussian_filter(vol, spec.partial_volume_sigma, mode="nearest")
    if spec.noise_sigma > 0:
        vol += rng.normal(0.0, spec.noise_sigma, size=vol.shape)
    ct = CtVolume(vol.astype(np.float32), spec.spacing, CANONICAL_AXES, provenance="phantom")
    label = LabelFile("", tuple(regions))
    return (ct, label, masks) if return_masks else (ct, label)


def coverage_labels(masks: Dict[str, np.ndarray], box: Tuple[slice, slice, slice]) -> Dict[str, float]:
    """Fraction of each region's bone voxels that fall inside ``box``."""
    cov = {}
    for region, m in masks.items():
        total = int(m.sum())
        cov[region] = int(m[box].sum()) / total if total else 0.0
    return cov


def crop_patch(vol: CtVolume, label: LabelFile, rng: np.random.Generator, masks: Dict[str, np.ndarray],
               spec: PhantomSpec | None = None, extents: Tuple[int, int, int] | None = None):
    """Random crop around a labelled region's centroid; returns (volume, label, masks).

    A region made of separate parts (left and right limbs) contributes the
    centroid of one randomly chosen part. The new label lists regions whose
    coverage inside the crop exceeds the threshold. Crops that would leave some region only barely visible are
    redrawn up to ``patch_retries`` times.
    """
    spec = spec or PhantomSpec(shape=vol.shape)
    if not label.regions:
        raise PreconditionError("cannot crop a volume without regions")
    shape = vol.shape
    lo_f, hi_f = spec.patch_extent
    box = None
    for _ in range(max(1, spec.patch_retries)):
        region = label.regions[rng.integers(len(label.regions))]
        parts, n_parts = ndimage.label(masks[region])
        part = parts == 1 + rng.integers(n_parts)
        center = np.array([c.mean() for c in np.nonzero(part)])
        if extents is None:
            ext = [max(spec.patch_min_voxels, int(round(n * rng.uniform(lo_f, hi_f)))) for n in shape]
        else:
            ext = list(extents)
        ext = [min(n, e) for n, e in zip(shape, ext)]
        if any(e < spec.patch_min_voxels for e in ext):
            raise PreconditionError(f"crop extents {ext} below the {spec.patch_min_voxels}^3 minimum")
        start = [int(np.clip(round(c - e / 2), 0, n - e)) for c, e, n in zip(center, ext, shape)]
        box = tuple(slice(s, s + e) for s, e in zip(start, ext))
        cov = coverage_labels(masks, box)
        if not any(spec.patch_reject_band < c <= spec.coverage_threshold for c in cov.values()):
            break
    cov = coverage_labels(masks, box)
    kept = tuple(r for r in label.regions if cov[r] > spec.coverage_threshold)
    patch = vol.with_voxels(np.ascontiguousarray(vol.voxels[box]))
    return patch, LabelFile(label.case_id, kept), {r: m[box] for r, m in masks.items()}


def contiguous_subset(spec: PhantomSpec, rng: np.random.Generator) -> List[str]:
    """Regions whose first primitive centre falls inside a random head-to-foot window."""
    centers = {r: spec.recipes[r][0][1] for r in spec.vocab}
    while True:
        length = rng.uniform(0.15, 1.2)
        start = rng.uniform(-0.1, 1.0 - min(length, 1.0) + 0.1)
        subset = [r for r, z in centers.items() if start <= z <= start + length]
        if subset:
            return subset


def split_counts(n: int) -> Tuple[int, int, int]:
    """70:15:15 with floored train/val and the remainder going to test."""
    train = n * 70 // 100
    val = n * 15 // 100
    return train, val, n - train - val


@dataclass
class ManifestEntry:
    sample_id: str
    path: str
    label_path: str
    regions: Tuple[str, ...]
    split: str
    source: str


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    seed: int
    spec: dict
    vocabulary: Tuple[str, ...]
    root: str = "."

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "vocabulary": list(self.vocabulary),
            "spec": self.spec,
            "entries": [
                {**asdict(e), "regions": list(e.regions)} for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, doc: dict, root=".") -> "DatasetManifest":
        entries = [ManifestEntry(**{**e, "regions": tuple(e["regions"])}) for e in doc["entries"]]
        return cls(entries, doc["seed"], doc.get("spec", {}), tuple(doc["vocabulary"]), str(root))

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from exc
    return DatasetManifest.from_json(doc, root=path.parent)


def _sample(spec: PhantomSpec, source: str, index: int, seed: int):
    rng = np.random.default_rng([seed, 0 if source == "full" else 1, index])
    if source == "full":
        vol, label = generate_phantom(spec, contiguous_subset(spec, rng), rng)
        return vol, label
    while True:
        vol, label, masks = generate_phantom(spec, contiguous_subset(spec, rng), rng, return_masks=True)
        patch, plabel, _ = crop_patch(vol, label, rng, masks, spec)
        if plabel.regions:
            return patch, plabel


def _assign_splits(n: int, rng: np.random.Generator) -> List[str]:
    tr, va, te = split_counts(n)
    tags = np.array(["train"] * tr + ["val"] * va + ["test"] * te)
    return list(tags[rng.permutation(n)])


def generate_dataset(spec: PhantomSpec, n_full: int, n_patches: int, seed: int, out_dir, max_attempts: int = 5) -> DatasetManifest:
    """Write NIFTI + JSON label pairs and ``manifest.json`` under ``out_dir``.

    Full-body and patch sources are split 70:15:15 independently. If some
    region never appears in the training split, the whole set is redrawn with
    a derived seed.
    """
    for n, name in ((n_full, "n_full"), (n_patches, "n_patches")):
        if n != 0 and n < 10:
            raise PreconditionError(f"{name} must be 0 or at least 10, got {n}")
    if n_full + n_patches == 0:
        raise PreconditionError("nothing to generate")
    out = Path(out_dir)
    vocab = spec.vocab
    for attempt in range(max_attempts):
        eff_seed = seed if attempt == 0 else seed + 1_000_003 * attempt
        plan = []
        for source, n in (("full", n_full), ("patch", n_patches)):
            tags = _assign_splits(n, np.random.default_rng([eff_seed, 2, 0 if source == "full" else 1]))
            for i in range(n):
                plan.append((source, i, tags[i]))
        samples = [(src, i, tag, *_sample(spec, src, i, eff_seed)) for src, i, tag in plan]
        seen = {r for _, _, tag, _, lab in samples if tag == "train" for r in lab.regions}
        if all(r in seen for r in vocab):
            break
        log.warning("seed %d: regions %s missing from training split, regenerating",
                    eff_seed, sorted(set(vocab.names) - seen))
    else:
        raise PreconditionError(f"could not cover every region in the training split after {max_attempts} attempts")

    out.mkdir(parents=True, exist_ok=True)
    (out / "volumes").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    entries = []
    for src, i, tag, vol, label in samples:
        sid = f"{src}_{i:05d}"
        srng = np.random.default_rng([eff_seed, 3, 0 if src == "full" else 1, i])
        axes = spec.storage_orientations[srng.integers(len(spec.storage_orientations))]
        stored = reorient(vol, axes)
        stored = stored.with_voxels(stored.voxels, provenance=f"phantom {sid}")
        rel_vol = f"volumes/{sid}.nii.gz"
        rel_lab = f"labels/{sid}.json"
        write_nifti(stored, out / rel_vol)
        label = LabelFile(sid, label.regions)
        write_labels(label, out / rel_lab)
        entries.append(ManifestEntry(sid, rel_vol, rel_lab, label.regions, tag, src))
    manifest = DatasetManifest(entries, eff_seed, spec.to_json(), vocab.names, str(out))
    atomic_write_json(out / "manifest.json", manifest.to_json())
    return manifest


def check_labels(manifest: DatasetManifest) -> None:
    """Re-read every label file and compare it with the manifest copy."""
    vocab = LabelVocabulary(manifest.vocabulary)
    for e in manifest.entries:
        lab = read_labels(manifest.resolve(e.label_path), vocab)
        if tuple(lab.regions) != tuple(e.regions):
            raise PreconditionError(f"label file of {e.sample_id} disagrees with the manifest")
