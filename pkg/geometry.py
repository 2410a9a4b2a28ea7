"""Boxes, overlap metrics, image <-> crop <-> grid algebra, box samplers and location labels."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import InputError, SamplingError

# A target of size (w, h) always lands on OBJECT_PIXELS crop pixels; one conv3
# cell is CELL_PIXELS crop pixels.
OBJECT_PIXELS = 75.0
CELL_PIXELS = 16.0
CELL_FRACTION = CELL_PIXELS / OBJECT_PIXELS
MIDDLE_THRESHOLD = 4.0 / OBJECT_PIXELS
LOC_OFFSET = 8.0 / OBJECT_PIXELS
SCALE_BASE = 1.2

PadValue = Union[float, Sequence[float]]


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InputError(f"Box has non-finite coordinates: {vals}")
        if self.w <= 0 or self.h <= 0:
            raise InputError(f"Box must have positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def scaled(self, s: float) -> "Box":
        cx, cy = self.center
        return Box.from_center(cx, cy, self.w * s, self.h * s)

    def shifted(self, dx: float, dy: float) -> "Box":
        return Box(self.x + dx, self.y + dy, self.w, self.h)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def iou(a: Box, b: Box) -> float:
    left = max(a.x, b.x)
    right = min(a.x + a.w, b.x + b.w)
    top = max(a.y, b.y)
    bottom = min(a.y + a.h, b.y + b.h)
    inter = max(0.0, right - left) * max(0.0, bottom - top)
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    return min(1.0, max(0.0, inter / union))


def iou_many(boxes: np.ndarray, ref: Box) -> np.ndarray:
    """IoU of an (N, 4) xywh array against one box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    left = np.maximum(boxes[:, 0], ref.x)
    right = np.minimum(boxes[:, 0] + boxes[:, 2], ref.x + ref.w)
    top = np.maximum(boxes[:, 1], ref.y)
    bottom = np.minimum(boxes[:, 1] + boxes[:, 3], ref.y + ref.h)
    inter = np.maximum(0.0, right - left) * np.maximum(0.0, bottom - top)
    union = boxes[:, 2] * boxes[:, 3] + ref.area - inter
    return np.clip(inter / union, 0.0, 1.0)


def center_error(a: Box, b: Box) -> float:
    ax, ay = a.center
    bx, by = b.center
    return math.hypot(ax - bx, ay - by)


def clip_box(box: Box, width: int, height: int, min_size: float = 1.0) -> Box:
    """Clip a box into a width x height frame, keeping at least min_size pixels per side."""
    x0 = min(max(box.x, 0.0), width - min_size)
    y0 = min(max(box.y, 0.0), height - min_size)
    x1 = max(min(box.x + box.w, float(width)), x0 + min_size)
    y1 = max(min(box.y + box.h, float(height)), y0 + min_size)
    return Box(x0, y0, x1 - x0, y1 - y0)


# ---------------------------------------------------------
# Crop algebra
# ---------------------------------------------------------

@dataclass(frozen=True)
class CropTransform:
    """Maps a dest_side x dest_side crop onto an image region around a target.

    The scaled target (scale * object_w, scale * object_h) covers exactly
    OBJECT_PIXELS crop pixels, so the source region is dest_side / 75 times
    the scaled target. Crop pixel p covers [p, p + 1); its center samples the
    image at center + (p + 0.5 - dest_side / 2) * pixel_scale.
    """

    center_x: float
    center_y: float
    object_w: float
    object_h: float
    scale: float
    dest_side: int
    pad_value: PadValue = 128.0
    image_size: Optional[Tuple[int, int]] = None  # (width, height)

    def __post_init__(self):
        if self.scale <= 0 or not math.isfinite(self.scale):
            raise InputError(f"Crop scale must be positive, got {self.scale}")
        if self.object_w <= 0 or self.object_h <= 0:
            raise InputError("Crop transform needs a non-degenerate target")
        if self.dest_side < 1:
            raise InputError(f"Crop side must be >= 1, got {self.dest_side}")

    @property
    def pixel_scale_x(self) -> float:
        return self.scale * self.object_w / OBJECT_PIXELS

    @property
    def pixel_scale_y(self) -> float:
        return self.scale * self.object_h / OBJECT_PIXELS

    @property
    def source_w(self) -> float:
        return self.dest_side * self.pixel_scale_x

    @property
    def source_h(self) -> float:
        return self.dest_side * self.pixel_scale_y

    @property
    def source_rect(self) -> Box:
        return Box.from_center(self.center_x, self.center_y, self.source_w, self.source_h)

    @property
    def target_box(self) -> Box:
        return Box.from_center(
            self.center_x, self.center_y, self.scale * self.object_w, self.scale * self.object_h
        )

    @property
    def cell_pitch(self) -> Tuple[float, float]:
        """Image pixels per conv3 cell along x and y."""
        return (CELL_PIXELS * self.pixel_scale_x, CELL_PIXELS * self.pixel_scale_y)

    def crop_to_image(self, px: float, py: float) -> Tuple[float, float]:
        half = self.dest_side / 2.0
        return (
            self.center_x + (px - half) * self.pixel_scale_x,
            self.center_y + (py - half) * self.pixel_scale_y,
        )

    def image_to_crop(self, u: float, v: float) -> Tuple[float, float]:
        half = self.dest_side / 2.0
        return (
            (u - self.center_x) / self.pixel_scale_x + half,
            (v - self.center_y) / self.pixel_scale_y + half,
        )

    def cell_offset(self, cx: float, cy: float) -> Tuple[float, float]:
        """Offset in conv3 cells of a window centered at image point (cx, cy)."""
        pitch_x, pitch_y = self.cell_pitch
        return ((cx - self.center_x) / pitch_x, (cy - self.center_y) / pitch_y)

    def recentered(self, cx: float, cy: float, scale: Optional[float] = None,
                   dest_side: Optional[int] = None) -> "CropTransform":
        return CropTransform(
            center_x=cx,
            center_y=cy,
            object_w=self.object_w,
            object_h=self.object_h,
            scale=self.scale if scale is None else scale,
            dest_side=self.dest_side if dest_side is None else dest_side,
            pad_value=self.pad_value,
            image_size=self.image_size,
        )


def roi_crop_transform(target: Box, s: float, dest_side: int,
                       image_dims: Optional[Tuple[int, int]] = None,
                       pad_value: PadValue = 128.0) -> CropTransform:
    """Transform under which (s*w, s*h) of `target` maps to 75x75 crop pixels at the crop center."""
    if target.w < 1e-6 or target.h < 1e-6:
        raise InputError(f"Degenerate target box {target.as_tuple()}")
    cx, cy = target.center
    return CropTransform(
        center_x=cx,
        center_y=cy,
        object_w=target.w,
        object_h=target.h,
        scale=float(s),
        dest_side=int(dest_side),
        pad_value=pad_value,
        image_size=image_dims,
    )


def grid_to_box(kx: int, ky: int, dx: float, dy: float, transform: CropTransform,
                s: Optional[float] = None) -> Box:
    scale = transform.scale if s is None else s
    ox = (kx + dx) * CELL_FRACTION * scale * transform.object_w
    oy = (ky + dy) * CELL_FRACTION * scale * transform.object_h
    return Box.from_center(
        transform.center_x + ox,
        transform.center_y + oy,
        scale * transform.object_w,
        scale * transform.object_h,
    )


def crop_patch(frame: np.ndarray, transform: CropTransform) -> np.ndarray:
    """Bilinear resample of the transform's source region into a dest_side^2 crop.

    Returns float32 (D, D, C). Samples falling outside the image take the pad value.
    """
    img = np.asarray(frame)
    if img.ndim == 2:
        img = img[:, :, None]
    height, width, channels = img.shape
    side = transform.dest_side
    p = np.arange(side, dtype=np.float64) + 0.5 - side / 2.0
    # pixel-index coordinates (pixel j center at j)
    xs = transform.center_x + p * transform.pixel_scale_x - 0.5
    ys = transform.center_y + p * transform.pixel_scale_y - 0.5
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx = (xs - x0)[None, :, None]
    wy = (ys - y0)[:, None, None]
    pad = np.broadcast_to(np.asarray(transform.pad_value, dtype=np.float64), (channels,))
    src = img.astype(np.float64, copy=False)

    def gather(yi: np.ndarray, xi: np.ndarray) -> np.ndarray:
        valid_y = (yi >= 0) & (yi < height)
        valid_x = (xi >= 0) & (xi < width)
        vals = src[np.clip(yi, 0, height - 1)][:, np.clip(xi, 0, width - 1)]
        mask = (valid_y[:, None] & valid_x[None, :])[:, :, None]
        return np.where(mask, vals, pad)

    out = (
        (1.0 - wy) * (1.0 - wx) * gather(y0, x0)
        + (1.0 - wy) * wx * gather(y0, x0 + 1)
        + wy * (1.0 - wx) * gather(y0 + 1, x0)
        + wy * wx * gather(y0 + 1, x0 + 1)
    )
    return out.astype(np.float32)


# ---------------------------------------------------------
# Localization classes
# ---------------------------------------------------------

class LocClass(IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3
    MIDDLE = 4

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def direction(self) -> Tuple[int, int]:
        """Unit move (x, y) that re-centers a patch on an object sitting in this class."""
        return {
            LocClass.UP: (0, -1),
            LocClass.DOWN: (0, 1),
            LocClass.LEFT: (-1, 0),
            LocClass.RIGHT: (1, 0),
            LocClass.MIDDLE: (0, 0),
        }[self]


def localization_label(sample: Box, target: Box) -> LocClass:
    sx, sy = sample.center
    tx, ty = target.center
    ox = (tx - sx) / sample.w
    oy = (ty - sy) / sample.h
    if max(abs(ox), abs(oy)) <= MIDDLE_THRESHOLD:
        return LocClass.MIDDLE
    if abs(ox) >= abs(oy):
        return LocClass.RIGHT if ox > 0 else LocClass.LEFT
    # y grows downward
    return LocClass.DOWN if oy > 0 else LocClass.UP


# ---------------------------------------------------------
# Samplers
# ---------------------------------------------------------

@dataclass
class BoxPredicate:
    """Named box filter; names show up in SamplingError messages."""

    name: str
    fn: Callable[[Box], bool] = field(repr=False)

    def __call__(self, box: Box) -> bool:
        return bool(self.fn(box))

    def __and__(self, other: "BoxPredicate") -> "BoxPredicate":
        return BoxPredicate(f"{self.name} & {other.name}", lambda b: self(b) and other(b))


def accept_all() -> BoxPredicate:
    return BoxPredicate("any", lambda _b: True)


def iou_above(reference: Box, threshold: float) -> BoxPredicate:
    return BoxPredicate(f"iou>{threshold:g}", lambda b: iou(b, reference) > threshold)


def iou_below(reference: Box, threshold: float) -> BoxPredicate:
    return BoxPredicate(f"iou<{threshold:g}", lambda b: iou(b, reference) < threshold)


def labeled_as(reference: Box, cls: LocClass) -> BoxPredicate:
    return BoxPredicate(f"loc={cls.label}", lambda b: localization_label(b, reference) == cls)


def sample_gaussian_boxes(rng: np.random.Generator, mean: Box, trans_sigma: float,
                          scale_sigma: float, n: int,
                          predicate: Optional[BoxPredicate] = None,
                          mean_offset: Tuple[float, float] = (0.0, 0.0),
                          max_attempts: Optional[int] = None) -> List[Box]:
    """Rejection-sample n boxes around `mean`.

    Center jitter ~ N(0, trans_sigma * mean(w, h)) per axis around the mean
    center shifted by mean_offset * (w, h); both sides scaled by
    1.2 ** N(0, scale_sigma). Gives up after 100 * n draws.
    """
    if n < 0 or trans_sigma < 0 or scale_sigma < 0:
        raise InputError("Sampler needs n >= 0 and non-negative sigmas")
    if n == 0:
        return []
    pred = predicate or accept_all()
    cap = max_attempts if max_attempts is not None else 100 * n
    cx, cy = mean.center
    cx += mean_offset[0] * mean.w
    cy += mean_offset[1] * mean.h
    sd = trans_sigma * (mean.w + mean.h) / 2.0
    out: List[Box] = []
    attempts = 0
    while len(out) < n and attempts < cap:
        chunk = min(max(n - len(out), 16), cap - attempts)
        jitter = rng.standard_normal((chunk, 3))
        for jx, jy, js in jitter:
            attempts += 1
            mult = SCALE_BASE ** (scale_sigma * js)
            box = Box.from_center(cx + sd * jx, cy + sd * jy, mean.w * mult, mean.h * mult)
            if pred(box):
                out.append(box)
                if len(out) == n:
                    break
    if len(out) < n:
        raise SamplingError(pred.name, n, len(out), attempts)
    return out
