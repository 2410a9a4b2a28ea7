#!/usr/bin/env python3

"""Box algebra, crop transforms, location labels and box samplers"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# Add current directory to path
sys.path.append(str(Path(__file__).parent))

from errors import InputError, SamplingError
from geometry import (
    CELL_FRACTION,
    Box,
    CropTransform,
    LocClass,
    center_error,
    clip_box,
    crop_patch,
    grid_to_box,
    iou,
    iou_above,
    iou_below,
    iou_many,
    localization_label,
    roi_crop_transform,
    sample_gaussian_boxes,
)

coords = st.floats(min_value=-200, max_value=200, allow_nan=False)
sizes = st.floats(min_value=1, max_value=150, allow_nan=False)
boxes = st.builds(Box, coords, coords, sizes, sizes)


def test_box_rejects_degenerate_input():
    with pytest.raises(InputError):
        Box(0, 0, 0, 10)
    with pytest.raises(InputError):
        Box(0, float("nan"), 5, 5)


def test_iou_known_values():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 5, 5)) == 0.0
    # half overlap: 50 / 150
    assert iou(a, Box(5, 0, 10, 10)) == pytest.approx(1.0 / 3.0)
    # touching edges do not overlap
    assert iou(a, Box(10, 0, 10, 10)) == 0.0


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    value = iou(a, b)
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(iou(b, a))


@given(st.lists(boxes, min_size=1, max_size=8), boxes)
def test_iou_many_matches_scalar(many, ref):
    arr = np.array([b.as_tuple() for b in many])
    expected = [iou(b, ref) for b in many]
    np.testing.assert_allclose(iou_many(arr, ref), expected, atol=1e-9)


def test_center_error_and_clip():
    assert center_error(Box(0, 0, 10, 10), Box(3, 4, 10, 10)) == pytest.approx(5.0)
    clipped = clip_box(Box(-5, -5, 20, 20), 10, 10)
    assert clipped.as_tuple() == (0.0, 0.0, 10.0, 10.0)
    # fully outside still keeps one pixel
    far = clip_box(Box(50, 50, 5, 5), 10, 10)
    assert far.w >= 1.0 and far.h >= 1.0


def test_crop_transform_maps_target_to_75_pixels():
    t = roi_crop_transform(Box(100, 50, 30, 60), 1.0, 107)
    assert t.pixel_scale_x == pytest.approx(30 / 75)
    assert t.pixel_scale_y == pytest.approx(60 / 75)
    assert t.source_w == pytest.approx(107 * 30 / 75)
    tb = t.target_box
    assert tb.as_tuple() == pytest.approx((100, 50, 30, 60))
    # cell pitch: 16 crop pixels
    assert t.cell_pitch == pytest.approx((16 * 30 / 75, 16 * 60 / 75))


@given(st.floats(min_value=-50, max_value=150), st.floats(min_value=-50, max_value=150),
       st.floats(min_value=0.5, max_value=2.0))
def test_crop_image_roundtrip(u, v, s):
    t = CropTransform(60.0, 40.0, 20.0, 30.0, s, 139)
    px, py = t.image_to_crop(u, v)
    back = t.crop_to_image(px, py)
    assert back == pytest.approx((u, v), abs=1e-6)


def test_cell_offset_matches_grid_to_box():
    t = roi_crop_transform(Box(40, 40, 20, 20), 1.0, 299)
    b = grid_to_box(2, -1, 0.5, 0.0, t)
    ox, oy = t.cell_offset(*b.center)
    assert (ox, oy) == pytest.approx((2.5, -1.0))
    # a cell is CELL_FRACTION of the scaled target
    assert t.cell_pitch[0] == pytest.approx(CELL_FRACTION * 20)


def test_crop_patch_identity_and_padding():
    frame = np.arange(75 * 75, dtype=np.float64).reshape(75, 75) % 251
    # 75-pixel target filling the crop: one image pixel per crop pixel
    t = CropTransform(37.5, 37.5, 75.0, 75.0, 1.0, 75)
    crop = crop_patch(frame, t)
    assert crop.shape == (75, 75, 1)
    assert crop.dtype == np.float32
    np.testing.assert_allclose(crop[:, :, 0], frame, atol=1e-3)

    far = CropTransform(-500.0, -500.0, 10.0, 10.0, 1.0, 11, pad_value=7.0)
    np.testing.assert_allclose(crop_patch(frame, far), 7.0)


def test_crop_patch_keeps_channels():
    frame = np.zeros((20, 30, 3), dtype=np.uint8)
    frame[..., 1] = 200
    crop = crop_patch(frame, CropTransform(15.0, 10.0, 10.0, 10.0, 1.0, 9))
    assert crop.shape == (9, 9, 3)
    np.testing.assert_allclose(crop[..., 1], 200.0)
    np.testing.assert_allclose(crop[..., 0], 0.0)


def test_localization_labels():
    target = Box(0, 0, 100, 100)
    assert localization_label(target, target) is LocClass.MIDDLE
    # sample sits left of the target, so the target is to its right
    assert localization_label(target.shifted(-20, 0), target) is LocClass.RIGHT
    assert localization_label(target.shifted(20, 0), target) is LocClass.LEFT
    assert localization_label(target.shifted(0, 20), target) is LocClass.UP
    assert localization_label(target.shifted(0, -20), target) is LocClass.DOWN
    # within 4/75 of a side counts as middle
    assert localization_label(target.shifted(5, 0), target) is LocClass.MIDDLE
    assert LocClass.UP.direction == (0, -1)
    assert LocClass.RIGHT.label == "right"


def test_sampler_respects_predicate():
    rng = np.random.default_rng(3)
    mean = Box(100, 100, 40, 40)
    pos = sample_gaussian_boxes(rng, mean, 0.1, 1.0, 50, predicate=iou_above(mean, 0.7))
    assert len(pos) == 50
    assert all(iou(b, mean) > 0.7 for b in pos)
    neg = sample_gaussian_boxes(rng, mean, 1.0, 1.0, 50, predicate=iou_below(mean, 0.5))
    assert all(iou(b, mean) < 0.5 for b in neg)


def test_sampler_is_deterministic_per_seed():
    mean = Box(10, 10, 20, 30)
    a = sample_gaussian_boxes(np.random.default_rng(9), mean, 0.3, 0.5, 20)
    b = sample_gaussian_boxes(np.random.default_rng(9), mean, 0.3, 0.5, 20)
    assert a == b


def test_sampler_zero_scale_sigma_keeps_size():
    mean = Box(0, 0, 30, 10)
    out = sample_gaussian_boxes(np.random.default_rng(0), mean, 0.03, 0.0, 10)
    assert all(math.isclose(b.w, 30) and math.isclose(b.h, 10) for b in out)


def test_sampler_gives_up():
    mean = Box(0, 0, 10, 10)
    impossible = iou_above(Box(1000, 1000, 10, 10), 0.5)
    with pytest.raises(SamplingError) as excinfo:
        sample_gaussian_boxes(np.random.default_rng(0), mean, 0.1, 0.1, 5, predicate=impossible)
    assert excinfo.value.got == 0
    assert excinfo.value.attempts == 500


@settings(max_examples=30)
@given(st.integers(min_value=0, max_value=40))
def test_sampler_count(n):
    out = sample_gaussian_boxes(np.random.default_rng(n), Box(0, 0, 10, 10), 0.5, 0.5, n)
    assert len(out) == n
