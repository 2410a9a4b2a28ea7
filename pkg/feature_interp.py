"""Feature-map reuse: window extraction, bilinear sub-cell sampling, scale blending, candidate grids."""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from backbone_nn import FeatureMap
from errors import ConfigurationError, GridRangeError

WINDOW_CELLS = 3

# Added to the horizontal bilinear weight; only the verify harness's fault
# injection ever sets it.
_WEIGHT_FAULT = 0.0


@contextlib.contextmanager
def corrupted_bilinear(delta: float) -> Iterator[None]:
    """Temporarily skew every bilinear blend by `delta` (fault injection)."""
    global _WEIGHT_FAULT
    previous = _WEIGHT_FAULT
    _WEIGHT_FAULT = float(delta)
    try:
        yield
    finally:
        _WEIGHT_FAULT = previous


@dataclass(frozen=True)
class GridOffset:
    """Window displacement from the map center: integer cells plus a fraction in [-1, 1]."""

    kx: int
    ky: int
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        if not (-1.0 <= self.dx <= 1.0 and -1.0 <= self.dy <= 1.0):
            raise GridRangeError(f"Fractional offsets must lie in [-1, 1], got dx={self.dx} dy={self.dy}")

    @classmethod
    def from_continuous(cls, ox: float, oy: float) -> "GridOffset":
        kx, ky = int(round(ox)), int(round(oy))
        return cls(kx, ky, ox - kx, oy - ky)

    @property
    def x(self) -> float:
        return self.kx + self.dx

    @property
    def y(self) -> float:
        return self.ky + self.dy

    @property
    def is_integer(self) -> bool:
        return self.dx == 0.0 and self.dy == 0.0


def _window_start(n: int, out_size: int) -> int:
    return (n - out_size) // 2


def _check_out_size(fmap: FeatureMap, out_size: int) -> None:
    if out_size < 1 or out_size > fmap.height or out_size > fmap.width:
        raise GridRangeError(f"Window of {out_size} cells does not fit a {fmap.height}x{fmap.width} map")


def window_limits(fmap: FeatureMap, out_size: int = WINDOW_CELLS) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Continuous (x, y) offset ranges whose windows stay inside the map's sample hull."""
    sx = _window_start(fmap.width, out_size)
    sy = _window_start(fmap.height, out_size)
    return (
        (float(-sx), float(fmap.width - out_size - sx)),
        (float(-sy), float(fmap.height - out_size - sy)),
    )


def window_in_hull(fmap: FeatureMap, ox, oy, out_size: int = WINDOW_CELLS):
    """True where a window displaced by continuous (ox, oy) cells can be sampled; works on arrays."""
    (x_lo, x_hi), (y_lo, y_hi) = window_limits(fmap, out_size)
    eps = 1e-9
    return (
        (np.asarray(ox) >= x_lo - eps) & (np.asarray(ox) <= x_hi + eps)
        & (np.asarray(oy) >= y_lo - eps) & (np.asarray(oy) <= y_hi + eps)
    )


def extract_window(fmap: FeatureMap, kx: int, ky: int, out_size: int = WINDOW_CELLS) -> FeatureMap:
    _check_out_size(fmap, out_size)
    x0 = _window_start(fmap.width, out_size) + int(kx)
    y0 = _window_start(fmap.height, out_size) + int(ky)
    if x0 < 0 or y0 < 0 or x0 + out_size > fmap.width or y0 + out_size > fmap.height:
        raise GridRangeError(
            f"Window ({kx}, {ky}) of {out_size} cells leaves the {fmap.height}x{fmap.width} map"
        )
    values = fmap.values[y0:y0 + out_size, x0:x0 + out_size, :].copy()
    return FeatureMap(values, scale=fmap.scale, transform=fmap.transform, offset=(float(kx), float(ky)))


def _bilinear_batch(values: np.ndarray, ox: np.ndarray, oy: np.ndarray, out_size: int) -> np.ndarray:
    """Sample N windows at continuous offsets; returns float32 (N, out, out, C).

    Cell centers sit at integer coordinates. Callers guarantee every position
    is inside the grid hull.
    """
    n_rows, n_cols = values.shape[:2]
    ox = np.atleast_1d(np.asarray(ox, dtype=np.float64))
    oy = np.atleast_1d(np.asarray(oy, dtype=np.float64))
    grid = np.arange(out_size, dtype=np.float64)
    cols = _window_start(n_cols, out_size) + ox[:, None] + grid[None, :]  # (N, out)
    rows = _window_start(n_rows, out_size) + oy[:, None] + grid[None, :]
    c0 = np.clip(np.floor(cols), 0, max(n_cols - 2, 0)).astype(np.int64)
    r0 = np.clip(np.floor(rows), 0, max(n_rows - 2, 0)).astype(np.int64)
    c1 = np.minimum(c0 + 1, n_cols - 1)
    r1 = np.minimum(r0 + 1, n_rows - 1)
    wx = (cols - c0) + _WEIGHT_FAULT
    wy = rows - r0
    src = values.astype(np.float64, copy=False)

    def take(r: np.ndarray, c: np.ndarray) -> np.ndarray:
        return src[r[:, :, None], c[:, None, :]]  # (N, out, out, C)

    wx4 = wx[:, None, :, None]
    wy4 = wy[:, :, None, None]
    top = take(r0, c0) * (1.0 - wx4) + take(r0, c1) * wx4
    bottom = take(r1, c0) * (1.0 - wx4) + take(r1, c1) * wx4
    return (top * (1.0 - wy4) + bottom * wy4).astype(np.float32)


def sample_windows(fmap: FeatureMap, ox, oy, out_size: int = WINDOW_CELLS) -> np.ndarray:
    """Batched sample_window_bilinear over arrays of continuous offsets."""
    _check_out_size(fmap, out_size)
    ox = np.atleast_1d(np.asarray(ox, dtype=np.float64))
    oy = np.atleast_1d(np.asarray(oy, dtype=np.float64))
    inside = window_in_hull(fmap, ox, oy, out_size)
    if not np.all(inside):
        bad = int(np.flatnonzero(~inside)[0])
        raise GridRangeError(
            f"Sample window at ({ox[bad]:.3f}, {oy[bad]:.3f}) cells leaves the "
            f"{fmap.height}x{fmap.width} grid hull"
        )
    return _bilinear_batch(fmap.values, ox, oy, out_size)


def sample_window_bilinear(fmap: FeatureMap, offset: GridOffset, out_size: int = WINDOW_CELLS) -> FeatureMap:
    values = sample_windows(fmap, [offset.x], [offset.y], out_size)[0]
    return FeatureMap(values, scale=fmap.scale, transform=fmap.transform, offset=(offset.x, offset.y))


# ---------------------------------------------------------
# Scale sets
# ---------------------------------------------------------

@dataclass
class ScaledMapSet:
    """Feature maps of one scene at a few fixed scale factors, strictly increasing."""

    entries: List[Tuple[float, FeatureMap]]

    def __post_init__(self):
        if not self.entries:
            raise ConfigurationError("ScaledMapSet needs at least one map")
        scales = [s for s, _ in self.entries]
        if any(s <= 0 or not math.isfinite(s) for s in scales):
            raise ConfigurationError(f"Scales must be positive, got {scales}")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ConfigurationError(f"Scales must be strictly increasing, got {scales}")
        channels = {m.channels for _, m in self.entries}
        if len(channels) != 1:
            raise ConfigurationError(f"Maps disagree on channel count: {sorted(channels)}")

    @property
    def scales(self) -> List[float]:
        return [s for s, _ in self.entries]

    @property
    def maps(self) -> List[FeatureMap]:
        return [m for _, m in self.entries]

    @property
    def s_min(self) -> float:
        return self.entries[0][0]

    @property
    def s_max(self) -> float:
        return self.entries[-1][0]

    def contains(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return (s >= self.s_min) & (s <= self.s_max)

    def bracket(self, s) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(lo index, hi index, alpha) for each scale; alpha is 0 on a stored scale."""
        s = np.atleast_1d(np.asarray(s, dtype=np.float64))
        if not np.all(self.contains(s)):
            bad = s[~self.contains(s)][0]
            raise GridRangeError(f"Scale {bad:.6g} outside [{self.s_min:.6g}, {self.s_max:.6g}]")
        scales = np.asarray(self.scales, dtype=np.float64)
        if len(scales) == 1:
            zeros = np.zeros(len(s), dtype=np.int64)
            return zeros, zeros, np.zeros(len(s))
        lo = np.clip(np.searchsorted(scales, s, side="right") - 1, 0, len(scales) - 2)
        hi = lo + 1
        alpha = (s - scales[lo]) / (scales[hi] - scales[lo])
        # a sample sitting on the top stored scale reads that map alone
        on_top = alpha >= 1.0
        lo = np.where(on_top, hi, lo)
        alpha = np.where(on_top, 0.0, alpha)
        return lo, hi, alpha


OffsetLike = Union[GridOffset, Tuple[float, float]]


def _xy(offset: OffsetLike) -> Tuple[float, float]:
    if isinstance(offset, GridOffset):
        return offset.x, offset.y
    return float(offset[0]), float(offset[1])


def interp_scale(scale_set: ScaledMapSet, s: float, offsets: Union[OffsetLike, Sequence[OffsetLike]],
                 out_size: int = WINDOW_CELLS) -> FeatureMap:
    """Sample the two maps bracketing `s`, each at its own offset, and blend linearly in s.

    `offsets` holds one offset per set entry (or a single offset shared by all).
    """
    if isinstance(offsets, GridOffset) or (
        isinstance(offsets, tuple) and len(offsets) == 2 and not isinstance(offsets[0], (tuple, GridOffset))
    ):
        per_entry = [_xy(offsets)] * len(scale_set.entries)
    else:
        per_entry = [_xy(o) for o in offsets]
    if len(per_entry) != len(scale_set.entries):
        raise ConfigurationError(
            f"Need one offset per map ({len(scale_set.entries)}), got {len(per_entry)}"
        )
    ox = [np.array([x]) for x, _ in per_entry]
    oy = [np.array([y]) for _, y in per_entry]
    values = interp_scale_batch(scale_set, np.array([s], dtype=np.float64), ox, oy, out_size)[0]
    lo, _, _ = scale_set.bracket([s])
    ref = scale_set.maps[int(lo[0])]
    return FeatureMap(values, scale=float(s), transform=ref.transform, offset=per_entry[int(lo[0])])


def interp_scale_batch(scale_set: ScaledMapSet, scales: np.ndarray,
                       ox: Sequence[np.ndarray], oy: Sequence[np.ndarray],
                       out_size: int = WINDOW_CELLS) -> np.ndarray:
    """Batched interp_scale; ox[j], oy[j] are the per-sample offsets in map j's cells."""
    scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    lo, hi, alpha = scale_set.bracket(scales)
    channels = scale_set.maps[0].channels
    out = np.zeros((len(scales), out_size, out_size, channels), dtype=np.float64)
    for j, fmap in enumerate(scale_set.maps):
        use_lo = lo == j
        use_hi = (hi == j) & (lo != j) & (alpha > 0.0)
        used = use_lo | use_hi
        if not np.any(used):
            continue
        idx = np.flatnonzero(used)
        sampled = sample_windows(fmap, np.asarray(ox[j])[idx], np.asarray(oy[j])[idx], out_size)
        weight = np.where(use_lo[idx], 1.0 - alpha[idx], alpha[idx])
        out[idx] += weight[:, None, None, None] * sampled.astype(np.float64)
    return out.astype(np.float32)


# ---------------------------------------------------------
# Candidate grid
# ---------------------------------------------------------

def grid_offsets(fmap: FeatureMap, out_size: int = WINDOW_CELLS) -> List[GridOffset]:
    """Every integer window offset of the map, row-major (ky outer, kx inner)."""
    _check_out_size(fmap, out_size)
    sx = _window_start(fmap.width, out_size)
    sy = _window_start(fmap.height, out_size)
    return [
        GridOffset(kx - sx, ky - sy)
        for ky in range(fmap.height - out_size + 1)
        for kx in range(fmap.width - out_size + 1)
    ]


def candidate_grid_batch(roi_map: FeatureMap, out_size: int = WINDOW_CELLS
                         ) -> Tuple[List[GridOffset], np.ndarray]:
    """All candidate windows as one (N, out, out, C) array, in grid_offsets order."""
    offsets = grid_offsets(roi_map, out_size)
    rows = roi_map.height - out_size + 1
    cols = roi_map.width - out_size + 1
    idx = np.arange(out_size)
    r = (np.arange(rows)[:, None] + idx[None, :])  # (rows, out)
    c = (np.arange(cols)[:, None] + idx[None, :])
    windows = roi_map.values[r[:, None, :, None], c[None, :, None, :]]  # (rows, cols, out, out, C)
    return offsets, windows.reshape(rows * cols, out_size, out_size, roi_map.channels).copy()


def candidate_grid(roi_map: FeatureMap, out_size: int = WINDOW_CELLS) -> List[Tuple[GridOffset, FeatureMap]]:
    offsets, windows = candidate_grid_batch(roi_map, out_size)
    return [
        (off, FeatureMap(win, scale=roi_map.scale, transform=roi_map.transform, offset=(off.kx, off.ky)))
        for off, win in zip(offsets, windows)
    ]


def max_candidate_offset(fmap: FeatureMap, out_size: int = WINDOW_CELLS) -> int:
    return min(fmap.width, fmap.height) // 2 - out_size // 2
