from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from xprojct.errors import OrientationError, PreconditionError
from xprojct.projection import (
    AUGMENT_ORDER,
    AugmentParams,
    ProjectionImage,
    augment,
    hsv_to_rgb,
    letterbox,
    minmax_normalize,
    project_axis,
    project_coronal,
    resize_letterbox,
    rgb_to_hsv,
    save_preview,
    to_uint8,
)
from xprojct.volume import CtVolume

from conftest import random_volume, triple_loop_sum


def _seed_with_pattern(pattern, p=0.5):
    """First seed whose eight Bernoulli draws fire exactly the wanted ops."""
    want = np.array([op in pattern for op in AUGMENT_ORDER])
    for seed in range(100000):
        if np.array_equal(np.random.default_rng(seed).random(8) < p, want):
            return seed
    raise AssertionError("no seed found")


@pytest.mark.parametrize("axis,index", [("superior-inferior", 0), ("anterior-posterior", 1), ("right-left", 2)])
def test_projection_matches_triple_loop(rng, axis, index):
    vol = random_volume(rng, (5, 7, 6))
    out = project_axis(vol, axis).pixels
    assert out.dtype == np.float64
    assert np.array_equal(out, triple_loop_sum(vol.voxels, index))


def test_single_slab_and_linearity(rng):
    slab = random_volume(rng, (4, 1, 3))
    assert np.array_equal(project_coronal(slab).pixels, slab.voxels[:, 0, :].astype(np.float64))
    v1 = random_volume(rng, (3, 4, 5), lo=-4, hi=4)
    v2 = random_volume(rng, (3, 4, 5), lo=-4, hi=4)
    a, b = 2.0, -3.0
    combo = CtVolume(a * v1.voxels + b * v2.voxels, axes="IPL")
    lhs = project_coronal(combo).pixels
    rhs = a * project_coronal(v1).pixels + b * project_coronal(v2).pixels
    assert np.allclose(lhs, rhs, atol=1e-4)


def test_projection_requires_canonical_axes(rng):
    with pytest.raises(OrientationError):
        project_coronal(random_volume(rng, axes="RAS"))
    with pytest.raises(PreconditionError):
        project_axis(random_volume(rng), "oblique")


def test_minmax_examples():
    out = minmax_normalize(ProjectionImage(np.array([[2.0, 4.0, 6.0]]))).pixels
    assert out.tolist() == [[0.0, 0.5, 1.0]]
    assert minmax_normalize(ProjectionImage(np.full((2, 2), 7.0))).pixels.tolist() == [[0, 0], [0, 0]]
    with pytest.raises(PreconditionError):
        minmax_normalize(ProjectionImage(np.array([[np.inf, 1.0]])))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-1e6, 1e6)))
def test_minmax_bounds_and_idempotence(p):
    out = minmax_normalize(ProjectionImage(p)).pixels
    assert out.min() >= 0 and out.max() <= 1
    if p.max() > p.min():
        assert out.min() == 0.0 and out.max() == 1.0
        again = minmax_normalize(ProjectionImage(out)).pixels
        assert np.allclose(again, out, atol=1e-12)


def test_letterbox_identity_and_arithmetic(rng):
    img = rng.uniform(size=(224, 224))
    assert np.array_equal(resize_letterbox(ProjectionImage(img)).pixels, img)
    tall = rng.uniform(0.1, 1.0, size=(448, 224))
    out = resize_letterbox(ProjectionImage(tall)).pixels
    assert out.shape == (224, 224)
    assert np.all(out[:, :56] == 0) and np.all(out[:, 168:] == 0)
    assert np.all(out[:, 56:168] > 0)


@pytest.mark.parametrize("shape", [(10, 10), (37, 37), (300, 300), (17, 5), (3, 40)])
def test_letterbox_constant_field(shape):
    out = letterbox(np.ones(shape), (224, 224))
    inside = out > 0
    assert np.all(np.abs(out[inside] - 1.0) <= 1e-6)
    assert set(np.unique(out[~inside]).tolist()) <= {0.0}
    rows, cols = np.flatnonzero(inside.any(1)), np.flatnonzero(inside.any(0))
    h, w = len(rows), len(cols)
    s = min(224 / shape[0], 224 / shape[1])
    assert (h, w) == (min(224, max(1, round(shape[0] * s))), min(224, max(1, round(shape[1] * s))))
    # centred: padding split evenly up to one pixel
    assert abs(rows[0] - (223 - rows[-1])) <= 1 and abs(cols[0] - (223 - cols[-1])) <= 1


def test_letterbox_cube():
    out = letterbox(np.ones((8, 4, 6)), (16, 16, 16))
    assert out.shape == (16, 16, 16)
    assert out[:, 4:12, 2:14].min() == 1.0 and out.sum() == 16 * 8 * 12


def test_augment_noop_seed_replicates():
    img = ProjectionImage(np.linspace(0, 1, 30).reshape(5, 6))
    out = augment(img, AugmentParams(), np.random.default_rng(_seed_with_pattern(set())))
    assert out.pixels.shape == (3, 5, 6)
    assert np.array_equal(out.pixels, np.repeat(img.pixels[None], 3, axis=0))


def test_augment_hflip_involution():
    img = ProjectionImage(np.random.default_rng(3).uniform(size=(6, 7)))
    seed = _seed_with_pattern({"hflip"})
    once = augment(img, AugmentParams(), np.random.default_rng(seed))
    assert np.array_equal(once.pixels[0], img.pixels[:, ::-1])
    twice = augment(once, AugmentParams(), np.random.default_rng(seed))
    assert np.array_equal(twice.pixels, np.repeat(img.pixels[None], 3, axis=0))


def test_hue_and_saturation_fix_gray():
    img = ProjectionImage(np.random.default_rng(5).uniform(size=(8, 9)))
    seed = _seed_with_pattern({"saturation", "hue"})
    out = augment(img, AugmentParams(), np.random.default_rng(seed))
    assert np.max(np.abs(out.pixels - img.pixels[None])) < 1e-6


def test_hsv_round_trip(rng):
    rgb = rng.uniform(size=(3, 10, 10))
    assert np.allclose(hsv_to_rgb(rgb_to_hsv(rgb)), rgb, atol=1e-12)


def test_augment_deterministic_and_bounded(rng):
    img = ProjectionImage(rng.uniform(size=(32, 32)))
    for seed in range(20):
        a = augment(img, AugmentParams(p_apply=1.0), np.random.default_rng(seed)).pixels
        b = augment(img, AugmentParams(p_apply=1.0), np.random.default_rng(seed)).pixels
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1


def test_rotation_keeps_constant_interior():
    seed = _seed_with_pattern({"rotate"})
    out = augment(ProjectionImage(np.ones((41, 41))), AugmentParams(), np.random.default_rng(seed)).pixels
    assert np.allclose(out[:, 15:26, 15:26], 1.0)


def test_augment_params_validation():
    with pytest.raises(PreconditionError):
        AugmentParams(p_apply=1.5)
    with pytest.raises(PreconditionError):
        AugmentParams(blur_kernel=4)


def test_preview_png_and_pgm(tmp_path):
    img = ProjectionImage(np.array([[0.0, 0.5], [0.25, 1.0]]))
    assert to_uint8(img).tolist() == [[0, 128], [64, 255]]
    for name in ("p.png", "p.pgm"):
        save_preview(img, tmp_path / name)
        assert np.array_equal(np.asarray(Image.open(tmp_path / name)), to_uint8(img))
    with pytest.raises(PreconditionError):
        save_preview(img, tmp_path / "p.jpg")
