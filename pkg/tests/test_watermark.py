import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fawa.textgen import render_text
from fawa.watermark import (
    MAX_COLOR_GRAY,
    GamutError,
    NoPerturbedRegionError,
    Rect,
    WatermarkSpec,
    apply_watermark,
    colorize,
    components,
    dilate,
    erode,
    find_position,
    morph_open_twice,
    render_watermark_mask,
    shift_mask,
    text_mask,
    to_gray,
    watermark_bitmap,
)
from oracles import brute_dilate, brute_erode, flood_components

masks = arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12)))


@settings(max_examples=80, deadline=None)
@given(masks)
def test_erode_dilate_match_brute_force(m):
    np.testing.assert_array_equal(erode(m), brute_erode(m))
    np.testing.assert_array_equal(dilate(m), brute_dilate(m))


@settings(max_examples=80, deadline=None)
@given(masks)
def test_opening_is_idempotent_and_anti_extensive(m):
    once = morph_open_twice(m)
    assert not np.any(once & ~m)
    np.testing.assert_array_equal(morph_open_twice(once), once)


@settings(max_examples=80, deadline=None)
@given(masks)
def test_components_match_flood_fill(m):
    got = components(m)
    want = flood_components(m)
    assert sorted(a for a, _ in got) == sorted(len(c) for c in want)
    boxes = {
        (min(r for r, _ in c), min(k for _, k in c), max(r for r, _ in c) + 1, max(k for _, k in c) + 1)
        for c in want
    }
    assert {r.as_tuple() for _, r in got} == boxes
    areas = [a for a, _ in got]
    assert areas == sorted(areas, reverse=True)


def test_component_ties_prefer_left_then_top():
    m = np.zeros((10, 10), dtype=bool)
    m[6:8, 6:8] = True
    m[0:2, 6:8] = True
    m[6:8, 0:2] = True
    order = [r.as_tuple() for _, r in components(m)]
    assert order == [(6, 0, 8, 2), (0, 6, 2, 8), (6, 6, 8, 8)]


def test_opening_removes_thin_noise():
    m = np.zeros((20, 20), dtype=bool)
    m[2:12, 2:12] = True
    m[15, :] = True  # one-pixel line
    out = morph_open_twice(m)
    assert not out[15].any()
    assert out[5:9, 5:9].all()


def test_find_position_picks_largest_block():
    x = np.ones((32, 40))
    adv = x.copy()
    adv[5:20, 10:22] -= 0.2
    adv[25:29, 30:34] -= 0.2
    adv[0, 0] -= 0.01  # tiny noise below the relative cut
    assert find_position(x, adv) == Rect(5, 10, 20, 22)


def test_find_position_errors():
    x = np.ones((32, 40))
    with pytest.raises(NoPerturbedRegionError):
        find_position(x, x)
    adv = x.copy()
    adv[3, 3] = 0.5
    with pytest.raises(NoPerturbedRegionError):
        find_position(x, adv)


def test_text_mask_and_apply():
    x = render_text("ab")
    tm = text_mask(x)
    np.testing.assert_array_equal(tm, x > 0.5)
    wm = np.zeros_like(tm)
    wm[:, :10] = True
    out = apply_watermark(x, wm, tm, 0.682)
    assert np.all(out[:, :10][x[:, :10] == 1.0] == 0.682)
    np.testing.assert_array_equal(out[x == 0.0], 0.0)
    np.testing.assert_array_equal(out[:, 10:], x[:, 10:])
    with pytest.raises(ValueError):
        text_mask(x, 1.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        WatermarkSpec(beta=1.2)
    with pytest.raises(ValueError):
        WatermarkSpec(text="ec!")
    with pytest.raises(ValueError):
        WatermarkSpec(rotation=120)


def test_watermark_bitmap_scales_with_anchor():
    spec = WatermarkSpec(rotation=0.0, stroke=1)
    small, large = watermark_bitmap(spec, 10), watermark_bitmap(spec, 30)
    assert large.shape[0] > small.shape[0] and large.sum() > small.sum()
    fixed = WatermarkSpec(glyph_height=63, rotation=0.0)
    np.testing.assert_array_equal(watermark_bitmap(fixed, 5), watermark_bitmap(fixed, 50))


def test_rotation_changes_footprint():
    flat = watermark_bitmap(WatermarkSpec(rotation=0.0), 20)
    tilted = watermark_bitmap(WatermarkSpec(rotation=15.0), 20)
    assert tilted.shape[0] > flat.shape[0]


def test_mask_covers_anchor():
    anchor = Rect(4, 30, 28, 45)
    spec = WatermarkSpec(anchor=anchor)
    m = render_watermark_mask(spec, (32, 90))
    assert m.shape == (32, 90)
    assert m[anchor.top : anchor.bottom, anchor.left : anchor.right].mean() > 0.2
    # most of the watermark sits near the anchor columns
    cols = np.flatnonzero(m.any(axis=0))
    assert cols.min() < anchor.right and cols.max() >= anchor.left


def test_mask_rejects_outside_anchor():
    with pytest.raises(ValueError):
        render_watermark_mask(WatermarkSpec(anchor=Rect(0, 80, 32, 95)), (32, 90))


def test_shift_mask():
    m = np.zeros((3, 6), dtype=bool)
    m[1, 1] = True
    assert shift_mask(m, 2)[1, 3]
    assert not shift_mask(m, -2).any()
    assert shift_mask(m, 0)[1, 1]


def test_colorize_round_trip_within_one_level():
    rng = np.random.default_rng(0)
    x = rng.uniform(0.4, MAX_COLOR_GRAY, (32, 50))
    m = rng.random((32, 50)) < 0.5
    rgb = colorize(x, m)
    assert rgb.dtype == np.uint8
    assert np.all(rgb[m, 0] == 255) and np.all(rgb[m, 2] == 0)
    assert np.max(np.abs(to_gray(rgb) - x)[m]) <= 1 / 255
    np.testing.assert_array_equal(rgb[~m, 0], rgb[~m, 1])


def test_colorize_gamut_error_names_pixel():
    x = np.full((4, 4), 0.5)
    x[2, 3] = 0.95
    m = np.ones((4, 4), dtype=bool)
    with pytest.raises(GamutError) as info:
        colorize(x, m)
    assert (info.value.row, info.value.col) == (2, 3)
    x[2, 3] = 0.1
    with pytest.raises(GamutError):
        colorize(x, m)


def test_max_gray_headroom():
    assert MAX_COLOR_GRAY == pytest.approx(0.886)
    assert 0.682 + 0.2 <= MAX_COLOR_GRAY
