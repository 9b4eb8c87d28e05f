"""X-ray-like 2D estimates of canonical volumes, plus model-input shaping."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
from scipy import ndimage

from .errors import OrientationError, PreconditionError
from .volume import CANONICAL_AXES, CtVolume, interp_axis

AXIS_NAMES = {
    "superior-inferior": 0,
    "anterior-posterior": 1,
    "right-left": 2,
}


@dataclass(frozen=True)
class ProjectionImage:
    pixels: np.ndarray
    normalized: bool = False

    @property
    def height(self) -> int:
        return self.pixels.shape[-2]

    @property
    def width(self) -> int:
        return self.pixels.shape[-1]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else self.pixels.shape[0]


def _sum_axis(voxels: np.ndarray, axis: int) -> np.ndarray:
    # slice-by-slice float64 accumulation; same order as a plain nested loop
    acc = np.zeros(voxels.shape[:axis] + voxels.shape[axis + 1 :], dtype=np.float64)
    for k in range(voxels.shape[axis]):
        acc += np.take(voxels, k, axis=axis)
    return acc


def project_axis(vol: CtVolume, axis: str) -> ProjectionImage:
    if axis not in AXIS_NAMES:
        raise PreconditionError(f"unknown projection axis {axis!r}; expected one of {sorted(AXIS_NAMES)}")
    if vol.axes != CANONICAL_AXES:
        raise OrientationError(f"projection needs canonical {CANONICAL_AXES} axes, volume is {vol.axes}")
    if vol.size == 0:
        raise PreconditionError("cannot project an empty volume")
    return ProjectionImage(_sum_axis(vol.voxels, AXIS_NAMES[axis]))


def project_coronal(vol: CtVolume) -> ProjectionImage:
    """Sum along the anterior-posterior axis; result is indexed [z, x]."""
    return project_axis(vol, "anterior-posterior")


def minmax_normalize(img: ProjectionImage) -> ProjectionImage:
    p = np.asarray(img.pixels, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise PreconditionError("cannot normalize non-finite pixels")
    lo, hi = p.min(), p.max()
    if hi == lo:
        return ProjectionImage(np.zeros_like(p), normalized=True)
    return ProjectionImage((p - lo) / (hi - lo), normalized=True)


def normalize_array(a: np.ndarray) -> np.ndarray:
    return minmax_normalize(ProjectionImage(a)).pixels


def letterbox(a: np.ndarray, target: Tuple[int, ...]) -> np.ndarray:
    """Aspect-preserving linear resize of an n-D array, centered and zero-padded."""
    a = np.asarray(a)
    if len(target) != a.ndim or any(t < 1 for t in target):
        raise PreconditionError(f"target {target} does not match array of shape {a.shape}")
    if a.size == 0:
        raise PreconditionError("cannot resize an empty array")
    if tuple(a.shape) == tuple(target):
        return a.copy()
    scale = min(t / n for t, n in zip(target, a.shape))
    new = tuple(min(t, max(1, int(round(n * scale)))) for t, n in zip(target, a.shape))
    out = a
    for ax, n_out in enumerate(new):
        if n_out != a.shape[ax] or scale != 1.0:
            out = interp_axis(out, ax, n_out, 1.0 / scale)
    canvas = np.zeros(target, dtype=out.dtype)
    offs = tuple((t - n) // 2 for t, n in zip(target, new))
    canvas[tuple(slice(o, o + n) for o, n in zip(offs, new))] = out
    return canvas


def resize_letterbox(img: ProjectionImage, target_h: int = 224, target_w: int = 224) -> ProjectionImage:
    if target_h < 1 or target_w < 1:
        raise PreconditionError("target size must be positive")
    return ProjectionImage(letterbox(img.pixels, (target_h, target_w)), normalized=img.normalized)


@dataclass(frozen=True)
class AugmentParams:
    p_apply: float = 0.5
    rotation_deg: float = 15.0
    noise_mu: float = 0.05
    noise_sigma: float = 0.05
    blur_kernel: int = 9
    blur_sigma_range: Tuple[float, float] = (0.1, 5.0)
    brightness_range: Tuple[float, float] = (0.8, 1.2)
    contrast_range: Tuple[float, float] = (0.8, 1.3)
    saturation: float = 0.5
    hue: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p_apply <= 1.0:
            raise PreconditionError("p_apply must lie in [0, 1]")
        for name in ("blur_sigma_range", "brightness_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise PreconditionError(f"{name} must be a non-empty range")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise PreconditionError("blur_kernel must be a positive odd integer")
        if not 0 <= self.hue <= 0.5:
            raise PreconditionError("hue jitter must lie in [0, 0.5]")


AUGMENT_ORDER = ("hflip", "rotate", "noise", "blur", "brightness", "contrast", "saturation", "hue")

_LUMA = np.array([0.299, 0.587, 0.114])


def _gray(rgb: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA, rgb, axes=(0, 0))


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb
    maxc = rgb.max(axis=0)
    minc = rgb.min(axis=0)
    delta = maxc - minc
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0, delta, 1.0)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.intp) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def augment(img: ProjectionImage, params: AugmentParams, rng: np.random.Generator) -> ProjectionImage:
    """Random training-time transforms; each one fires independently with ``p_apply``.

    The single-channel input is replicated to three channels first so the
    colour jitters have something to act on.
    """
    p = np.asarray(img.pixels, dtype=np.float64)
    if p.ndim == 2:
        x = np.repeat(p[None], 3, axis=0)
    elif p.ndim == 3 and p.shape[0] == 3:
        x = p.copy()
    else:
        raise PreconditionError(f"augment expects HxW or 3xHxW pixels, got {p.shape}")
    fire = rng.random(len(AUGMENT_ORDER)) < params.p_apply

    if fire[0]:
        x = x[:, :, ::-1].copy()
    if fire[1]:
        angle = rng.uniform(-params.rotation_deg, params.rotation_deg)
        x = ndimage.rotate(x, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
    if fire[2]:
        x = x + rng.normal(params.noise_mu, params.noise_sigma, size=x.shape)
        np.clip(x, 0.0, 1.0, out=x)
    if fire[3]:
        sigma = rng.uniform(*params.blur_sigma_range)
        k = _gaussian_kernel(params.blur_kernel, sigma)
        x = ndimage.convolve1d(x, k, axis=1, mode="mirror")
        x = ndimage.convolve1d(x, k, axis=2, mode="mirror")
        np.clip(x, 0.0, 1.0, out=x)
    if fire[4]:
        x = x * rng.uniform(*params.brightness_range)
        np.clip(x, 0.0, 1.0, out=x)
    if fire[5]:
        f = rng.uniform(*params.contrast_range)
        x = f * x + (1.0 - f) * _gray(x).mean()
        np.clip(x, 0.0, 1.0, out=x)
    if fire[6]:
        f = rng.uniform(max(0.0, 1.0 - params.saturation), 1.0 + params.saturation)
        x = f * x + (1.0 - f) * _gray(x)[None]
        np.clip(x, 0.0, 1.0, out=x)
    if fire[7]:
        shift = rng.uniform(-params.hue, params.hue)
        hsv = rgb_to_hsv(x)
        hsv[0] = (hsv[0] + shift) % 1.0
        x = hsv_to_rgb(hsv)
        np.clip(x, 0.0, 1.0, out=x)
    np.clip(x, 0.0, 1.0, out=x)
    return ProjectionImage(x, normalized=True)


def to_uint8(img: ProjectionImage) -> np.ndarray:
    p = np.asarray(img.pixels, dtype=np.float64)
    if p.ndim == 3:
        p = p[0]
    return np.rint(np.clip(p, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_preview(img: ProjectionImage, path) -> None:
    """8-bit grayscale export; PNG or PGM chosen by suffix."""
    from PIL import Image

    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".png", ".pgm"):
        raise PreconditionError(f"preview must be .png or .pgm, got {path.name}")
    pil = Image.fromarray(to_uint8(img), mode="L")
    tmp = path.with_name(f".{path.name}.tmp")
    pil.save(tmp, format="PNG" if suffix == ".png" else "PPM")
    tmp.replace(path)
