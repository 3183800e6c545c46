import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gage.attention import (AttentionMap, Box, Mask, binarize, box_to_image_space, crop_resize, extract_roi,
                            max_intensity_projection, min_perimeter_box, normalize_heatmap)
from gage.errors import ConfigurationError, NoActivationError


def brute_force_box(bits, coverage):
    """Every box in the grid, active cells recounted directly; lexicographic (perim, area, r0, c0, r1)."""
    h, w = bits.shape
    need = max(1, math.ceil(coverage * bits.sum() - 1e-9))
    best = None
    for r0, r1 in itertools.combinations_with_replacement(range(h), 2):
        for c0, c1 in itertools.combinations_with_replacement(range(w), 2):
            if bits[r0:r1 + 1, c0:c1 + 1].sum() >= need:
                hh, ww = r1 - r0 + 1, c1 - c0 + 1
                key = (2 * (hh + ww), hh * ww, r0, c0, r1)
                if best is None or key < best[0]:
                    best = (key, (r0, c0, r1, c1))
    return best[1]


def random_masks(n, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        h, w = rng.integers(1, 13, size=2)
        bits = rng.random((h, w)) < rng.uniform(0.05, 0.9)
        if not bits.any():
            bits[rng.integers(h), rng.integers(w)] = True
        yield bits


@pytest.mark.parametrize("coverage", [0.5, 0.9, 1.0])
def test_box_matches_brute_force(coverage):
    for bits in random_masks(500, seed=int(coverage * 100)):
        assert min_perimeter_box(bits, coverage).as_tuple() == brute_force_box(bits, coverage)


def test_full_coverage_is_tight_box():
    for bits in random_masks(200, seed=9):
        rows, cols = np.flatnonzero(bits.any(1)), np.flatnonzero(bits.any(0))
        assert min_perimeter_box(bits, 1.0).as_tuple() == (rows[0], cols[0], rows[-1], cols[-1])


def test_single_pixel_box():
    bits = np.zeros((5, 6), bool)
    bits[2, 3] = True
    assert min_perimeter_box(bits, 1.0) == Box(2, 3, 2, 3)


def test_full_mask_box():
    assert min_perimeter_box(np.ones((4, 7), bool), 1.0).as_tuple() == (0, 0, 3, 6)


def test_empty_mask_raises():
    with pytest.raises(NoActivationError):
        min_perimeter_box(np.zeros((3, 3), bool))


def test_coverage_ignores_outlier():
    bits = np.zeros((12, 12), bool)
    bits[2:6, 2:6] = True
    bits[11, 11] = True  # 1 of 17 active cells
    assert min_perimeter_box(bits, 0.9).as_tuple() == (2, 2, 5, 5)
    assert min_perimeter_box(bits, 1.0).as_tuple() == (2, 2, 11, 11)


def test_max_intensity_projection():
    fm = np.array([[[1, 2], [3, 4]], [[4, 3], [2, 1]]], dtype=float)
    np.testing.assert_array_equal(max_intensity_projection(fm), [[4, 3], [3, 4]])
    np.testing.assert_array_equal(max_intensity_projection(fm[:1]), fm[0])


def test_max_intensity_projection_loop_oracle():
    fm = np.random.default_rng(0).normal(size=(8, 4, 4))
    want = np.array([[max(fm[c, i, j] for c in range(8)) for j in range(4)] for i in range(4)])
    np.testing.assert_array_equal(max_intensity_projection(fm), want)


def test_normalize():
    m = normalize_heatmap(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_allclose(m.values, [[0, 1 / 3], [2 / 3, 1]])
    assert not m.degenerate
    assert normalize_heatmap(np.full((3, 3), 5.0)).degenerate
    with pytest.raises(ValueError):
        normalize_heatmap(np.array([[np.nan, 1.0]]))


def test_binarize_strict():
    m = AttentionMap(np.array([[0.2, 0.3, 0.4]]))
    np.testing.assert_array_equal(binarize(m, 0.3).bits, [[False, False, True]])
    for bad in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigurationError):
            binarize(m, bad)


finite = arrays(np.float64, st.tuples(st.integers(2, 10), st.integers(2, 10)),
                elements=st.floats(-1e3, 1e3, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(finite, st.floats(0.01, 0.99))
def test_normalized_map_properties(raw, tau):
    m = normalize_heatmap(raw)
    if m.degenerate:
        return
    assert m.values.min() == 0.0 and m.values.max() == 1.0
    assert binarize(m, tau).count >= 1


@settings(max_examples=100, deadline=None)
@given(finite, st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_raising_tau_never_adds_pixels(raw, tau, delta):
    m = normalize_heatmap(raw)
    hi = min(tau + delta, 0.99)
    assert binarize(m, hi).count <= binarize(m, tau).count


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.integers(0, 200).map(float)), st.floats(0.1, 0.9),
       st.floats(0.5, 20.0), st.floats(-50.0, 50.0))
def test_mask_invariant_to_affine_rescale(raw, tau, a, b):
    # integer-valued maps keep the rescaling exact enough to compare masks
    m1 = normalize_heatmap(raw)
    m2 = normalize_heatmap(a * raw + b)
    if m1.degenerate:
        assert m2.degenerate
        return
    close = np.isclose(m1.values, tau, atol=1e-9)
    np.testing.assert_array_equal(binarize(m1, tau).bits[~close], binarize(m2, tau).bits[~close])


def test_box_to_image_space_examples():
    assert box_to_image_space(Box(0, 0, 6, 6), 32, 224, 16).as_tuple() == (0, 0, 223, 223)
    assert box_to_image_space(Box(2, 2, 2, 2), 32, 224, 16).as_tuple() == (64, 64, 95, 95)
    b = box_to_image_space(Box(0, 11, 0, 11), 8, 96, 8)
    assert b.as_tuple() == (0, 88, 7, 95)


def test_box_to_image_space_min_side_at_corner():
    b = box_to_image_space(Box(0, 0, 0, 0), 1, 20, 8)
    assert (b.height, b.width) == (8, 8) and b.r0 == 0 and b.c0 == 0
    b = box_to_image_space(Box(19, 19, 19, 19), 1, 20, 8)
    assert (b.height, b.width) == (8, 8) and b.r1 == 19 and b.c1 == 19


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 11), st.integers(0, 11), st.integers(0, 11), st.integers(0, 11), st.integers(8, 40))
def test_box_to_image_space_is_total(a, b, c, d, min_side):
    box = Box(min(a, b), min(c, d), max(a, b), max(c, d))
    out = box_to_image_space(box, 8, 96, min_side)
    assert 0 <= out.r0 <= out.r1 < 96 and 0 <= out.c0 <= out.c1 < 96
    assert out.height >= min_side and out.width >= min_side


def test_crop_identity():
    img = np.random.default_rng(0).uniform(0, 255, size=(16, 16))
    np.testing.assert_allclose(crop_resize(img, Box(0, 0, 15, 15, "image"), 16), img, atol=1e-6)


def test_crop_bilinear_2x2_to_3x3():
    out = crop_resize(np.array([[0.0, 1.0], [1.0, 2.0]]), Box(0, 0, 1, 1, "image"), 3)
    np.testing.assert_allclose(out, [[0, 0.5, 1], [0.5, 1, 1.5], [1, 1.5, 2]])


def test_crop_constant():
    np.testing.assert_allclose(crop_resize(np.full((9, 9), 7.0), Box(2, 1, 6, 8, "image"), 13), 7.0)


def test_crop_side_one_replicates():
    img = np.arange(25, dtype=float).reshape(5, 5)
    out = crop_resize(img, Box(2, 1, 2, 3, "image"), 5)
    np.testing.assert_allclose(out, np.tile(np.linspace(11, 13, 5), (5, 1)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30))
def test_crop_is_convex(seed, out):
    rng = np.random.default_rng(seed)
    img = rng.uniform(0, 255, size=(12, 12))
    r0, c0 = rng.integers(0, 11, size=2)
    r1, c1 = rng.integers(r0 + 1, 12), rng.integers(c0 + 1, 12)
    crop = crop_resize(img, Box(r0, c0, r1, c1, "image"), out)
    patch = img[r0:r1 + 1, c0:c1 + 1]
    assert crop.min() >= patch.min() - 1e-9 and crop.max() <= patch.max() + 1e-9


def test_extract_roi_degenerate_falls_back():
    img = np.random.default_rng(0).uniform(size=(96, 96))
    res = extract_roi(np.ones((4, 12, 12)), img, 0.3, 0.95, 8, 96)
    assert res.fallback and res.box.as_tuple() == (0, 0, 95, 95)
    np.testing.assert_allclose(res.crop, img, atol=1e-6)


def test_extract_roi_high_tau_respects_min_side():
    fm = np.random.default_rng(1).uniform(size=(3, 12, 12))
    res = extract_roi(fm, np.zeros((96, 96)), 0.99, 0.95, 8, 96, min_side=8)
    assert not res.fallback
    assert res.box.height >= 8 and res.box.width >= 8


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 6, 6), elements=st.floats(0, 10)), st.floats(0.01, 0.99), st.floats(0.1, 1.0))
def test_extract_roi_is_total(fm, tau, kappa):
    res = extract_roi(fm, np.zeros((48, 48)), tau, kappa, 8, 24)
    assert res.crop.shape == (24, 24)
    assert 0 <= res.box.r0 <= res.box.r1 < 48 and 0 <= res.box.c0 <= res.box.c1 < 48
