#!/usr/bin/env python3

"""Window extraction, bilinear sub-cell sampling, scale blending and the candidate grid"""

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

# Add current directory to path
sys.path.append(str(Path(__file__).parent))

from backbone_nn import FeatureMap
from errors import ConfigurationError, GridRangeError
from feature_interp import (
    GridOffset,
    ScaledMapSet,
    candidate_grid,
    candidate_grid_batch,
    corrupted_bilinear,
    extract_window,
    grid_offsets,
    interp_scale,
    max_candidate_offset,
    sample_window_bilinear,
    sample_windows,
    window_in_hull,
    window_limits,
)


def random_map(side, channels=4, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return FeatureMap(rng.standard_normal((side, side, channels)).astype(np.float32), scale=scale)


def ramp_map(side, a, b, c=0.0):
    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    values = (a * xs + b * ys + c)[:, :, None]
    return FeatureMap(values.astype(np.float32))


def test_extract_window_positions():
    fmap = random_map(15)
    center = extract_window(fmap, 0, 0)
    np.testing.assert_array_equal(center.values, fmap.values[6:9, 6:9])
    moved = extract_window(fmap, 2, -3)
    np.testing.assert_array_equal(moved.values, fmap.values[3:6, 8:11])
    assert moved.offset == (2.0, -3.0)
    with pytest.raises(GridRangeError):
        extract_window(fmap, 7, 0)


def test_window_limits_and_hull():
    fmap = random_map(15)
    assert window_limits(fmap) == ((-6.0, 6.0), (-6.0, 6.0))
    small = random_map(5)
    assert window_limits(small) == ((-1.0, 1.0), (-1.0, 1.0))
    inside = window_in_hull(small, np.array([0.0, 1.0, 1.01]), np.array([0.5, -1.0, 0.0]))
    assert list(inside) == [True, True, False]
    assert max_candidate_offset(fmap) == 6


def test_integer_offsets_reproduce_extraction():
    fmap = random_map(15, seed=3)
    for kx, ky in [(0, 0), (-6, 6), (3, -2)]:
        sampled = sample_window_bilinear(fmap, GridOffset(kx, ky))
        np.testing.assert_allclose(sampled.values, extract_window(fmap, kx, ky).values, atol=1e-6)


def test_half_cell_is_neighbour_average():
    fmap = random_map(5, seed=1)
    half = sample_window_bilinear(fmap, GridOffset(0, 0, 0.5, 0.0)).values
    expected = 0.5 * (fmap.values[1:4, 1:4] + fmap.values[1:4, 2:5])
    np.testing.assert_allclose(half, expected, atol=1e-6)


@settings(max_examples=50)
@given(st.floats(min_value=-1.0, max_value=1.0), st.floats(min_value=-1.0, max_value=1.0),
       st.floats(min_value=-3, max_value=3), st.floats(min_value=-3, max_value=3))
def test_bilinear_is_exact_on_linear_maps(ox, oy, a, b):
    fmap = ramp_map(5, a, b, 1.0)
    values = sample_windows(fmap, [ox], [oy])[0, :, :, 0]
    grid = np.arange(3, dtype=np.float64)
    expected = a * (1 + ox + grid[None, :]) + b * (1 + oy + grid[:, None]) + 1.0
    np.testing.assert_allclose(values, expected, atol=1e-4)


def test_sampling_outside_hull_raises():
    fmap = random_map(5)
    with pytest.raises(GridRangeError):
        sample_windows(fmap, [1.5], [0.0])
    with pytest.raises(GridRangeError):
        GridOffset(0, 0, 1.5, 0.0)


def test_grid_offset_from_continuous():
    off = GridOffset.from_continuous(2.3, -0.6)
    assert (off.kx, off.ky) == (2, -1)
    assert off.x == pytest.approx(2.3)
    assert off.y == pytest.approx(-0.6)
    assert not off.is_integer
    assert GridOffset(1, 1).is_integer


def test_fault_hook_skews_and_resets():
    fmap = random_map(5, seed=7)
    clean = sample_windows(fmap, [0.25], [0.0])
    with corrupted_bilinear(0.25):
        skewed = sample_windows(fmap, [0.25], [0.0])
    assert not np.allclose(clean, skewed)
    np.testing.assert_array_equal(sample_windows(fmap, [0.25], [0.0]), clean)


def test_scaled_map_set_validation():
    a, b = random_map(5, seed=1), random_map(5, seed=2)
    with pytest.raises(ConfigurationError):
        ScaledMapSet([])
    with pytest.raises(ConfigurationError):
        ScaledMapSet([(1.0, a), (1.0, b)])
    with pytest.raises(ConfigurationError):
        ScaledMapSet([(1.0, a), (1.05, random_map(5, channels=2))])


def test_bracket_and_blend():
    lo_map, mid_map, hi_map = random_map(5, seed=1), random_map(15, seed=2), random_map(5, seed=3)
    scale_set = ScaledMapSet([(1 / 1.05, lo_map), (1.0, mid_map), (1.05, hi_map)])
    lo, hi, alpha = scale_set.bracket([1 / 1.05, 1.0, 1.05])
    assert list(alpha) == pytest.approx([0.0, 0.0, 0.0])
    assert list(lo) == [0, 1, 2]

    on_mid = interp_scale(scale_set, 1.0, (0.0, 0.0))
    np.testing.assert_allclose(on_mid.values, mid_map.values[6:9, 6:9], atol=1e-6)

    s = (1.0 + 1.05) / 2.0
    blended = interp_scale(scale_set, s, [(0.0, 0.0), (0.0, 0.0), (0.5, 0.0)])
    expected = 0.5 * mid_map.values[6:9, 6:9] + 0.5 * sample_windows(hi_map, [0.5], [0.0])[0]
    np.testing.assert_allclose(blended.values, expected, atol=1e-5)

    with pytest.raises(GridRangeError):
        scale_set.bracket([1.2])
    with pytest.raises(ConfigurationError):
        interp_scale(scale_set, 1.0, [(0.0, 0.0)])


def test_single_map_set_reads_only_that_map():
    fmap = random_map(15, seed=4)
    one = ScaledMapSet([(1.0, fmap)])
    out = interp_scale(one, 1.0, GridOffset(1, -1, 0.25, 0.0))
    np.testing.assert_allclose(out.values, sample_windows(fmap, [1.25], [-1.0])[0], atol=1e-6)


def test_candidate_grid_is_row_major_and_complete():
    fmap = random_map(15, seed=5)
    offsets, windows = candidate_grid_batch(fmap)
    assert len(offsets) == 169
    assert windows.shape == (169, 3, 3, 4)
    assert (offsets[0].kx, offsets[0].ky) == (-6, -6)
    assert (offsets[1].kx, offsets[1].ky) == (-5, -6)
    assert (offsets[13].kx, offsets[13].ky) == (-6, -5)
    for i in (0, 40, 84, 168):
        off = offsets[i]
        np.testing.assert_array_equal(windows[i], extract_window(fmap, off.kx, off.ky).values)
    assert offsets == grid_offsets(fmap)
    assert len(candidate_grid(random_map(5))) == 9
