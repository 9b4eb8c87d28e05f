"""Histogram-driven bone window.

The volume histogram (250 bins over the clipped HU range) is inspected inside
a soft-tissue search window. The median count of that window is subtracted
from every bin and negatives are zeroed; the highest window bin that still
has mass marks where soft tissue ends, and everything below it is pushed to
air before projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, PreconditionError
from .volume import HU_MAX, HU_MIN, CtVolume

N_BINS = 250


@dataclass(frozen=True)
class IntensityHistogram:
    edges: np.ndarray
    counts: np.ndarray

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def bins(self) -> int:
        return len(self.counts)


@dataclass(frozen=True)
class RoiSearchWindow:
    search_lo: float = -400.0
    search_hi: float = 400.0
    upper: float = HU_MAX

    def __post_init__(self):
        if not self.search_lo < self.search_hi < self.upper:
            raise ConfigError(
                f"search window needs search_lo < search_hi < upper, got "
                f"{self.search_lo}, {self.search_hi}, {self.upper}"
            )


@dataclass(frozen=True)
class RoiBounds:
    lower_hu: float
    upper_hu: float = HU_MAX
    fallback: bool = False

    def __post_init__(self):
        if not self.lower_hu < self.upper_hu:
            raise PreconditionError(f"lower bound {self.lower_hu} must be below upper {self.upper_hu}")


def compute_histogram(vol: CtVolume, bins: int = N_BINS, lo: float = HU_MIN, hi: float = HU_MAX) -> IntensityHistogram:
    """Uniform histogram; a value equal to ``hi`` lands in the last bin."""
    v = vol.voxels.ravel()
    if v.size == 0:
        raise PreconditionError("histogram of an empty volume")
    if v.min() < lo or v.max() > hi:
        raise PreconditionError(f"voxels outside [{lo}, {hi}]; clip before computing the histogram")
    edges = np.linspace(lo, hi, bins + 1)
    x = v.astype(np.float64)
    idx = np.floor((x - lo) * (bins / (hi - lo))).astype(np.intp)
    np.clip(idx, 0, bins - 1, out=idx)
    # the scaled index can be off by one next to an edge; settle against the edges themselves
    idx -= x < edges[idx]
    idx += (x >= edges[idx + 1]) & (idx < bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.int64)
    return IntensityHistogram(edges=edges, counts=counts)


def window_mask(hist: IntensityHistogram, win: RoiSearchWindow) -> np.ndarray:
    centers = hist.centers
    if win.search_lo < hist.edges[0] or win.search_hi > hist.edges[-1]:
        raise ConfigError(
            f"search window [{win.search_lo}, {win.search_hi}] outside histogram range "
            f"[{hist.edges[0]}, {hist.edges[-1]}]"
        )
    mask = (centers >= win.search_lo) & (centers <= win.search_hi)
    if not mask.any():
        raise ConfigError("search window contains no bin centers")
    return mask


def adjusted_counts(hist: IntensityHistogram, win: RoiSearchWindow) -> np.ndarray:
    """Counts after subtracting the window median and clipping at zero."""
    mask = window_mask(hist, win)
    med = np.median(hist.counts[mask].astype(np.float64))
    return np.maximum(hist.counts.astype(np.float64) - med, 0.0)


def detect_roi_bounds(hist: IntensityHistogram, win: RoiSearchWindow | None = None) -> RoiBounds:
    win = win or RoiSearchWindow()
    mask = window_mask(hist, win)
    adjusted = adjusted_counts(hist, win)
    alive = np.flatnonzero(mask & (adjusted > 0))
    if alive.size == 0:
        return RoiBounds(lower_hu=float(win.search_lo), upper_hu=win.upper, fallback=True)
    return RoiBounds(lower_hu=float(hist.centers[alive[-1]]), upper_hu=win.upper)


def apply_roi(vol: CtVolume, bounds: RoiBounds) -> CtVolume:
    v = vol.voxels
    out = np.where(v < np.float32(bounds.lower_hu), np.float32(HU_MIN), v)
    np.minimum(out, np.float32(bounds.upper_hu), out=out)
    return vol.with_voxels(out.astype(np.float32, copy=False))


def roi_debug(hist: IntensityHistogram, win: RoiSearchWindow, bounds: RoiBounds) -> dict:
    """JSON-ready dump of the histogram and the chosen window for inspection."""
    return {
        "bin_centers": [float(c) for c in hist.centers],
        "counts": [int(c) for c in hist.counts],
        "adjusted_counts": [float(c) for c in adjusted_counts(hist, win)],
        "search_window": [win.search_lo, win.search_hi],
        "lower_hu": bounds.lower_hu,
        "upper_hu": bounds.upper_hu,
        "fallback": bounds.fallback,
    }
