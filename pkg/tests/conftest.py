from __future__ import annotations

import numpy as np
import pytest

from xprojct.volume import CtVolume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, shape=(5, 7, 6), axes="IPL", spacing=(1.0, 1.0, 1.0), lo=-1024, hi=1500):
    return CtVolume(rng.uniform(lo, hi, size=shape).astype(np.float32), spacing, axes)


def triple_loop_sum(voxels: np.ndarray, axis: int) -> np.ndarray:
    """Reference projection: explicit loops, float64 accumulation in index order."""
    nz, ny, nx = voxels.shape
    if axis == 0:
        out = np.zeros((ny, nx))
        for j in range(ny):
            for i in range(nx):
                s = 0.0
                for k in range(nz):
                    s += float(voxels[k, j, i])
                out[j, i] = s
    elif axis == 1:
        out = np.zeros((nz, nx))
        for k in range(nz):
            for i in range(nx):
                s = 0.0
                for j in range(ny):
                    s += float(voxels[k, j, i])
                out[k, i] = s
    else:
        out = np.zeros((nz, ny))
        for k in range(nz):
            for j in range(ny):
                s = 0.0
                for i in range(nx):
                    s += float(voxels[k, j, i])
                out[k, j] = s
    return out


def literal_roi_oracle(counts, centers, lo=-400.0, hi=400.0):
    """Histogram window rule spelled out with plain Python lists."""
    window = [i for i, c in enumerate(centers) if lo <= c <= hi]
    vals = sorted(int(counts[i]) for i in window)
    n = len(vals)
    med = vals[n // 2] if n % 2 else (vals[n // 2 - 1] + vals[n // 2]) / 2.0
    adjusted = [max(0.0, c - med) for c in counts]
    best = None
    for i in window:
        if adjusted[i] > 0:
            best = i
    return (lo, True) if best is None else (float(centers[best]), False)
