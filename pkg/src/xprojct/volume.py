"""CT volume container and the geometric preprocessing stages.

Covers isotropic resampling, Hounsfield clipping and reorientation into the
canonical coronal layout used by the projection step.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Tuple

import numpy as np

from .errors import OrientationError, PreconditionError, ResourceLimitError

HU_MIN = -1024.0
HU_MAX = 1500.0

# axis0 superior->inferior, axis1 anterior->posterior, axis2 right->left
CANONICAL_AXES = "IPL"

_OPPOSITE = {"R": "L", "L": "R", "A": "P", "P": "A", "S": "I", "I": "S"}
_PAIR = {"R": 0, "L": 0, "A": 1, "P": 1, "S": 2, "I": 2}


def validate_axes(axes: str) -> None:
    """Raise OrientationError unless ``axes`` is one of the 48 signed permutations."""
    if not isinstance(axes, str) or len(axes) != 3:
        raise OrientationError(f"axis codes must be three letters, got {axes!r}")
    letters = axes.upper()
    if any(c not in _PAIR for c in letters):
        raise OrientationError(f"unknown axis code in {axes!r}")
    if len({_PAIR[c] for c in letters}) != 3:
        raise OrientationError(f"axis codes {axes!r} repeat an anatomical direction")


@dataclass(frozen=True)
class CtVolume:
    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    axes: str = "RAS"
    provenance: str = ""
    oblique: bool = False

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise PreconditionError(f"volume must be 3D, got shape {vox.shape}")
        if not np.all(np.isfinite(vox)):
            raise PreconditionError("volume contains non-finite voxel values")
        validate_axes(self.axes)
        object.__setattr__(self, "voxels", vox)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(not s > 0 for s in spacing):
            raise PreconditionError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "axes", self.axes.upper())

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.voxels.shape

    @property
    def size(self) -> int:
        return int(self.voxels.size)

    def with_voxels(self, voxels: np.ndarray, **changes) -> "CtVolume":
        return replace(self, voxels=voxels, **changes)


@dataclass(frozen=True)
class ResampleConfig:
    target_spacing_mm: float = 0.5
    max_output_voxels: int = 1_500_000_000

    def __post_init__(self):
        if not self.target_spacing_mm > 0:
            raise PreconditionError("target_spacing_mm must be positive")
        if self.max_output_voxels < 1:
            raise PreconditionError("max_output_voxels must be positive")


def resampled_shape(shape, spacing, target: float) -> Tuple[int, int, int]:
    return tuple(max(1, int(round(n * s / target))) for n, s in zip(shape, spacing))


def interp_axis(a: np.ndarray, axis: int, n_out: int, step: float) -> np.ndarray:
    # output sample j sits at the physical center (j + 0.5) * step of the input grid
    n_in = a.shape[axis]
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) * step - 0.5
    coords = np.clip(coords, 0.0, n_in - 1)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = (coords - i0).astype(np.float32)
    shape = [1] * a.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    lo = np.take(a, i0, axis=axis)
    hi = np.take(a, i1, axis=axis)
    out = lo + w * (hi - lo)
    # rounding guard: stay inside the convex hull of the two neighbours
    np.clip(out, np.minimum(lo, hi), np.maximum(lo, hi), out=out)
    return out


def resample_isotropic(vol: CtVolume, cfg: ResampleConfig | None = None) -> CtVolume:
    """Trilinear resampling onto an isotropic grid with clamp-to-edge sampling."""
    cfg = cfg or ResampleConfig()
    if vol.size == 0:
        raise PreconditionError("cannot resample an empty volume")
    t = cfg.target_spacing_mm
    out_shape = resampled_shape(vol.shape, vol.spacing, t)
    n_out = int(np.prod(out_shape, dtype=np.int64))
    if n_out > cfg.max_output_voxels:
        raise ResourceLimitError(
            f"resampling {vol.shape} at {vol.spacing} mm to {t} mm needs {n_out} voxels "
            f"(limit {cfg.max_output_voxels})"
        )
    a = vol.voxels
    # shrinking axes first keeps intermediates small
    order = sorted(range(3), key=lambda ax: out_shape[ax] / a.shape[ax])
    for ax in order:
        if out_shape[ax] == a.shape[ax] and vol.spacing[ax] == t:
            continue
        a = interp_axis(a, ax, out_shape[ax], t / vol.spacing[ax])
    return vol.with_voxels(np.ascontiguousarray(a, dtype=np.float32), spacing=(t, t, t))


def clip_hu(vol: CtVolume, lo: float = HU_MIN, hi: float = HU_MAX) -> CtVolume:
    if not lo < hi:
        raise PreconditionError(f"clip bounds must satisfy lo < hi, got {lo}, {hi}")
    return vol.with_voxels(np.clip(vol.voxels, np.float32(lo), np.float32(hi)))


def orientation_transform(src: str, dst: str) -> Tuple[Tuple[int, int, int], Tuple[bool, bool, bool]]:
    """Return (perm, flips) such that ``transpose(perm)`` then flipping the
    flagged output axes maps an array laid out as ``src`` onto ``dst``."""
    validate_axes(src)
    validate_axes(dst)
    src, dst = src.upper(), dst.upper()
    perm, flips = [], []
    for letter in dst:
        for k, s in enumerate(src):
            if _PAIR[s] == _PAIR[letter]:
                perm.append(k)
                flips.append(s != letter)
                break
    return tuple(perm), tuple(flips)


def reorient(vol: CtVolume, target: str) -> CtVolume:
    if vol.oblique:
        raise OrientationError("oblique volume cannot be reoriented by axis permutation")
    perm, flips = orientation_transform(vol.axes, target)
    a = np.transpose(vol.voxels, perm)
    flip_axes = tuple(i for i, f in enumerate(flips) if f)
    if flip_axes:
        a = np.flip(a, axis=flip_axes)
    spacing = tuple(vol.spacing[p] for p in perm)
    return vol.with_voxels(np.ascontiguousarray(a), spacing=spacing, axes=target.upper())


def standardize_coronal(vol: CtVolume) -> CtVolume:
    return reorient(vol, CANONICAL_AXES)


def opposite_code(axes: str) -> str:
    return "".join(_OPPOSITE[c] for c in axes.upper())
