"""Tracking-by-detection loop: first-frame training, coarse and fine localization, sample banks, online updates."""
from __future__ import annotations

import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Deque, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from backbone_nn import FeatureMap, HardNegativeMiner, SgdConfig, train_heads
from errors import ConfigurationError, GridRangeError, InputError, SamplingError, TrainingError
from feature_interp import (
    GridOffset,
    ScaledMapSet,
    WINDOW_CELLS,
    candidate_grid_batch,
    interp_scale_batch,
    window_in_hull,
)
from geometry import (
    CELL_FRACTION,
    LOC_OFFSET,
    Box,
    BoxPredicate,
    CropTransform,
    LocClass,
    clip_box,
    crop_patch,
    iou_above,
    iou_below,
    iou_many,
    labeled_as,
    sample_gaussian_boxes,
)

LOGGER = logging.getLogger("ilnet.tracker")

PATCH_SIDE = 107
SCALE_SIDE = 139
ROI_SIDE = 299


@dataclass
class TrackerConfig:
    score_threshold: float = 0.5
    pos_iou: float = 0.7
    neg_iou: float = 0.5
    init_scale_step: float = 1.2
    fine_scale_step: float = 1.05
    long_term_interval: int = 10
    frame_pos: int = 30
    frame_loc: int = 30
    frame_neg: int = 100
    online_iterations: int = 10
    init_iterations: int = 90
    object_batch: int = 128
    loc_batch: int = 65
    positives_per_batch: int = 32
    mining_pool: int = 1024
    mining_keep: int = 96
    coarse_step: float = LOC_OFFSET
    fine_offsets: Tuple[float, ...] = (-0.4, -0.2, 0.0, 0.2, 0.4)
    fine_scale_draws: int = 4
    fine_scale_sigma: float = 0.05
    fine_top: int = 3
    long_window: int = 100
    short_window: int = 20
    neg_window: int = 20
    init_pos: int = 500
    init_loc: int = 500
    init_neg: int = 2500
    pos_trans_sigma: float = 0.1
    pos_scale_sigma: float = 1.0
    loc_trans_sigma: float = 0.03
    loc_scale_sigma: float = 0.0
    init_neg_trans_sigma: float = 1.0
    init_neg_scale_sigma: float = 1.0
    online_neg_trans_sigma: float = 0.6
    online_scale_sigma: float = 0.25
    lr_hidden: float = 1e-3
    lr_logits: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    pad_value: float = 128.0
    feature_reuse: bool = True
    seed: int = 0

    def validate(self) -> None:
        for name in ("score_threshold", "pos_iou", "neg_iou"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1), got {value}")
        counts = ("long_term_interval", "frame_pos", "frame_loc", "frame_neg", "online_iterations",
                  "init_iterations", "object_batch", "loc_batch", "positives_per_batch", "mining_pool",
                  "mining_keep", "fine_scale_draws", "fine_top", "long_window", "short_window",
                  "neg_window", "init_pos", "init_loc", "init_neg")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.init_scale_step <= 1.0 or self.fine_scale_step <= 1.0:
            raise ConfigurationError("Scale steps must be > 1")
        if self.short_window > self.long_window:
            raise ConfigurationError("short_window cannot exceed long_window")
        if self.mining_keep > self.mining_pool:
            raise ConfigurationError("mining_keep cannot exceed mining_pool")
        if self.fine_top > self.fine_sample_count:
            raise ConfigurationError("fine_top cannot exceed the number of fine samples")
        if not self.fine_offsets or any(abs(o) >= 1.0 for o in self.fine_offsets):
            raise ConfigurationError("fine_offsets must be non-empty and inside (-1, 1) cells")
        self.sgd().validate()

    @property
    def fine_sample_count(self) -> int:
        return len(self.fine_offsets) ** 2 * self.fine_scale_draws

    def sgd(self, lr_gain: float = 1.0) -> SgdConfig:
        return SgdConfig(
            lr_hidden=self.lr_hidden * lr_gain,
            lr_logits=self.lr_logits * lr_gain,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            object_batch=self.object_batch,
            loc_batch=self.loc_batch,
            positives_per_batch=self.positives_per_batch,
            iterations=self.online_iterations,
        )

    def miner(self) -> HardNegativeMiner:
        return HardNegativeMiner(pool=self.mining_pool, keep=self.mining_keep)

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        data["fine_offsets"] = list(self.fine_offsets)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "TrackerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown tracker config key(s): {', '.join(unknown)}")
        values = dict(data)
        if "fine_offsets" in values:
            values["fine_offsets"] = tuple(float(v) for v in values["fine_offsets"])  # type: ignore[union-attr]
        cfg = cls(**values)  # type: ignore[arg-type]
        cfg.validate()
        return cfg


class ScoringModel(Protocol):
    def forward(self, crop: np.ndarray, *, scale: float = 1.0,
                transform: Optional[CropTransform] = None) -> FeatureMap: ...

    def object_scores(self, features: np.ndarray) -> np.ndarray: ...

    def location_probs(self, features: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------
# Sample banks
# ---------------------------------------------------------

@dataclass
class SampleBlock:
    frame: int
    features: np.ndarray
    labels: Optional[np.ndarray] = None


class SampleBank:
    """Per-frame feature blocks, at most `window` blocks and `window * per_frame` records."""

    def __init__(self, name: str, window: int, per_frame: int):
        self.name = name
        self.window = window
        self.capacity = window * per_frame
        self.blocks: Deque[SampleBlock] = deque()

    def __len__(self) -> int:
        return sum(len(b.features) for b in self.blocks)

    @property
    def frames(self) -> List[int]:
        return [b.frame for b in self.blocks]

    def add(self, frame: int, features: np.ndarray, labels: Optional[np.ndarray] = None) -> None:
        if self.blocks and frame < self.blocks[-1].frame:
            raise InputError(f"{self.name} bank: frame {frame} older than last block {self.blocks[-1].frame}")
        if len(features) > self.capacity:
            features = features[: self.capacity]
            labels = None if labels is None else labels[: self.capacity]
        self.blocks.append(SampleBlock(frame, np.asarray(features, dtype=np.float32),
                                       None if labels is None else np.asarray(labels, dtype=np.int64)))
        self._evict()

    def _evict(self) -> None:
        while len(self.blocks) > self.window:
            self.blocks.popleft()
        # oldest records go first, a partly trimmed block keeps its frame tag
        while len(self) > self.capacity:
            excess = len(self) - self.capacity
            oldest = self.blocks[0]
            if len(oldest.features) <= excess:
                self.blocks.popleft()
                continue
            self.blocks[0] = SampleBlock(oldest.frame, oldest.features[excess:],
                                         None if oldest.labels is None else oldest.labels[excess:])

    def recent(self, n_blocks: Optional[int] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        blocks = list(self.blocks)
        if n_blocks is not None:
            blocks = blocks[-n_blocks:] if n_blocks > 0 else []
        if not blocks:
            return np.zeros((0,), dtype=np.float32), None
        feats = np.concatenate([b.features for b in blocks])
        labels = None
        if all(b.labels is not None for b in blocks):
            labels = np.concatenate([b.labels for b in blocks])  # type: ignore[misc]
        return feats, labels


class SampleStore:
    def __init__(self, config: TrackerConfig):
        self.positive = SampleBank("positive", config.long_window, config.frame_pos)
        self.localization = SampleBank("localization", config.long_window, config.frame_loc)
        self.negative = SampleBank("negative", config.neg_window, config.frame_neg)

    def sizes(self) -> Dict[str, int]:
        return {"positive": len(self.positive), "localization": len(self.localization),
                "negative": len(self.negative)}


# ---------------------------------------------------------
# Featurizers
# ---------------------------------------------------------

class MapFeaturizer:
    """Features for arbitrary boxes by bilinear + scale-linear sampling of retained maps.

    Relative scale of a box is box.w / (base_scale * base_w). With `scale_range`
    wider than the stored set, out-of-set scales read the nearest stored map.
    """

    def __init__(self, scale_set: ScaledMapSet, base_scale: float, base_size: Tuple[float, float],
                 scale_range: Optional[Tuple[float, float]] = None):
        self.scale_set = scale_set
        self.base_scale = base_scale
        self.base_w, self.base_h = base_size
        self.scale_range = scale_range or (scale_set.s_min, scale_set.s_max)
        for _, fmap in scale_set.entries:
            if fmap.transform is None:
                raise ConfigurationError("Retained feature maps need their crop transform")

    def _arrays(self, boxes: Sequence[Box]):
        arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
        cx = arr[:, 0] + arr[:, 2] / 2.0
        cy = arr[:, 1] + arr[:, 3] / 2.0
        rel = arr[:, 2] / (self.base_scale * self.base_w)
        return cx, cy, rel

    def _offsets(self, cx: np.ndarray, cy: np.ndarray):
        ox, oy = [], []
        for _, fmap in self.scale_set.entries:
            x, y = fmap.transform.cell_offset(cx, cy)  # type: ignore[union-attr]
            ox.append(np.asarray(x, dtype=np.float64))
            oy.append(np.asarray(y, dtype=np.float64))
        return ox, oy

    def _reachable_mask(self, cx, cy, rel) -> np.ndarray:
        lo, hi = self.scale_range
        ok = (rel >= lo - 1e-12) & (rel <= hi + 1e-12)
        clipped = np.clip(rel, self.scale_set.s_min, self.scale_set.s_max)
        ok_idx = np.flatnonzero(ok)
        if len(ok_idx) == 0:
            return ok
        b_lo, b_hi, alpha = self.scale_set.bracket(clipped[ok_idx])
        ox, oy = self._offsets(cx[ok_idx], cy[ok_idx])
        inside = np.ones(len(ok_idx), dtype=bool)
        for j, fmap in enumerate(self.scale_set.maps):
            needed = (b_lo == j) | ((b_hi == j) & (alpha > 0.0))
            inside &= ~needed | window_in_hull(fmap, ox[j], oy[j], WINDOW_CELLS)
        ok[ok_idx] = inside
        return ok

    def reachable(self, box: Box) -> bool:
        cx, cy, rel = self._arrays([box])
        return bool(self._reachable_mask(cx, cy, rel)[0])

    def predicate(self) -> BoxPredicate:
        return BoxPredicate("reachable", self.reachable)

    def featurize(self, boxes: Sequence[Box]) -> np.ndarray:
        if not boxes:
            return np.zeros((0, WINDOW_CELLS, WINDOW_CELLS, self.scale_set.maps[0].channels), dtype=np.float32)
        cx, cy, rel = self._arrays(boxes)
        lo, hi = self.scale_range
        if np.any((rel < lo - 1e-12) | (rel > hi + 1e-12)):
            raise GridRangeError(f"Sample scale outside [{lo:.4g}, {hi:.4g}]")
        clipped = np.clip(rel, self.scale_set.s_min, self.scale_set.s_max)
        ox, oy = self._offsets(cx, cy)
        return interp_scale_batch(self.scale_set, clipped, ox, oy, WINDOW_CELLS)


class PatchFeaturizer:
    """Brute-force path: crop and forward each box's own 107x107 patch."""

    def __init__(self, model: ScoringModel, frame: np.ndarray, pad_value: float = 128.0):
        self.model = model
        self.frame = frame
        self.pad_value = pad_value
        self.forwards = 0

    def reachable(self, box: Box) -> bool:
        return True

    def predicate(self) -> BoxPredicate:
        return BoxPredicate("any", self.reachable)

    def featurize(self, boxes: Sequence[Box]) -> np.ndarray:
        feats = [self.forward_box(b) for b in boxes]
        if not feats:
            return np.zeros((0, WINDOW_CELLS, WINDOW_CELLS, 0), dtype=np.float32)
        return np.stack(feats)

    def forward_box(self, box: Box) -> np.ndarray:
        h, w = self.frame.shape[:2]
        transform = CropTransform(*box.center, box.w, box.h, 1.0, PATCH_SIDE, self.pad_value, (w, h))
        fmap = self.model.forward(crop_patch(self.frame, transform), transform=transform)
        self.forwards += 1
        return fmap.values


# ---------------------------------------------------------
# State
# ---------------------------------------------------------

@dataclass
class TrackerState:
    model: ScoringModel
    box: Box
    scale: float
    base_size: Tuple[float, float]
    frame_index: int
    store: SampleStore
    rng: np.random.Generator
    config: TrackerConfig
    image_size: Tuple[int, int]
    last_maps: Optional[ScaledMapSet] = None


@dataclass
class CoarseResult:
    box: Optional[Box]
    best_score: float
    survivors: int
    index: Optional[int] = None


@dataclass
class FineResult:
    box: Box
    scale: float
    score: float


@dataclass
class FrameResult:
    frame_index: int
    box: Box
    score: float
    scale: float
    detected: bool
    backbone_forwards: int
    survivors: int
    updates: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    collected: bool = False

    def to_dict(self) -> Dict[str, object]:
        return {
            "frame": self.frame_index,
            "box": list(self.box.as_tuple()),
            "score": self.score,
            "scale": self.scale,
            "detected": self.detected,
            "backbone_forwards": self.backbone_forwards,
            "survivors": self.survivors,
            "updates": list(self.updates),
            "timings": dict(self.timings),
            "collected": self.collected,
        }


@dataclass
class InitResult:
    state: TrackerState
    backbone_forwards: int
    timings: Dict[str, float]
    close_negatives: int
    far_negatives: int


def _crop_transform(state: TrackerState, cx: float, cy: float, scale: float, side: int) -> CropTransform:
    bw, bh = state.base_size
    return CropTransform(cx, cy, bw, bh, scale, side, state.config.pad_value, state.image_size)


def roi_transform(state: TrackerState) -> CropTransform:
    """299 px ROI crop around the current box at the current scale."""
    cx, cy = state.box.center
    return _crop_transform(state, cx, cy, state.scale, ROI_SIDE)


def _forward(state: TrackerState, frame: np.ndarray, transform: CropTransform, rel_scale: float) -> FeatureMap:
    return state.model.forward(crop_patch(frame, transform), scale=rel_scale, transform=transform)


def _featurizer_for(state: TrackerState, frame: np.ndarray, scale_set: ScaledMapSet,
                    base_scale: float, scale_range: Optional[Tuple[float, float]] = None):
    if state.config.feature_reuse:
        return MapFeaturizer(scale_set, base_scale, state.base_size, scale_range)
    return PatchFeaturizer(state.model, frame, state.config.pad_value)


def _lr_gain(model: ScoringModel) -> float:
    spec = getattr(model, "spec", None)
    return float(getattr(spec, "lr_gain", 1.0))


def _frame_array(frame: np.ndarray) -> np.ndarray:
    img = np.asarray(frame)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise InputError(f"Frame must be (H, W) or (H, W, C), got {img.shape}")
    return img


# ---------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------

def _sample_loc_boxes(rng: np.random.Generator, target: Box, n: int, config: TrackerConfig,
                      reach: BoxPredicate) -> Tuple[List[Box], np.ndarray]:
    """n boxes split evenly over the five classes; the remainder goes to the first classes."""
    boxes: List[Box] = []
    labels: List[int] = []
    per_class, extra = divmod(n, len(LocClass))
    for cls in LocClass:
        count = per_class + (1 if int(cls) < extra else 0)
        if count == 0:
            continue
        ux, uy = cls.direction
        # the sample sits opposite to where the object is seen inside it
        offset = (-ux * LOC_OFFSET, -uy * LOC_OFFSET)
        pred = labeled_as(target, cls) & iou_above(target, config.pos_iou) & reach
        got = sample_gaussian_boxes(rng, target, config.loc_trans_sigma, config.loc_scale_sigma, count,
                                    pred, mean_offset=offset)
        boxes.extend(got)
        labels.extend([int(cls)] * len(got))
    return boxes, np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------
# Initial frame
# ---------------------------------------------------------

def init(first_frame: np.ndarray, init_box: Box, config: TrackerConfig, model: ScoringModel) -> InitResult:
    """Train both heads on the first frame and return a ready tracker state."""
    config.validate()
    frame = _frame_array(first_frame)
    height, width = frame.shape[:2]
    box = clip_box(init_box, width, height)
    if box.w < 2 or box.h < 2:
        raise InputError(f"Initial box {init_box.as_tuple()} is degenerate inside a {width}x{height} frame")
    rng = np.random.default_rng(config.seed)
    state = TrackerState(
        model=model, box=box, scale=1.0, base_size=(box.w, box.h), frame_index=0,
        store=SampleStore(config), rng=rng, config=config, image_size=(width, height),
    )
    timings: Dict[str, float] = {}
    forwards = 0
    cx, cy = box.center

    t0 = time.perf_counter()
    step = config.init_scale_step
    entries = []
    for rel in (1.0 / step, 1.0, step):
        entries.append((rel, _forward(state, frame, _crop_transform(state, cx, cy, rel, SCALE_SIDE), rel)))
        forwards += 1
    scale_maps = ScaledMapSet(entries)
    roi_map = _forward(state, frame, _crop_transform(state, cx, cy, 1.0, ROI_SIDE), 1.0)
    forwards += 1
    timings["forward"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pos_feat = _featurizer_for(state, frame, scale_maps, 1.0)
    reach = pos_feat.predicate()
    positives = sample_gaussian_boxes(rng, box, config.pos_trans_sigma, config.pos_scale_sigma,
                                      config.init_pos, iou_above(box, config.pos_iou) & reach)
    loc_boxes, loc_labels = _sample_loc_boxes(rng, box, config.init_loc, config, reach)
    negatives = sample_gaussian_boxes(rng, box, config.init_neg_trans_sigma, config.init_neg_scale_sigma,
                                      config.init_neg, iou_below(box, config.neg_iou))
    timings["sample"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pos_x = pos_feat.featurize(positives)
    loc_x = pos_feat.featurize(loc_boxes)
    close_feat = MapFeaturizer(ScaledMapSet([(1.0, roi_map)]), 1.0, state.base_size,
                               scale_range=(1.0 / step, step))
    if config.feature_reuse:
        close_mask = np.array([close_feat.reachable(b) for b in negatives], dtype=bool)
    else:
        close_mask = np.zeros(len(negatives), dtype=bool)
    far_feat = PatchFeaturizer(model, frame, config.pad_value)
    neg_x = np.zeros((len(negatives), WINDOW_CELLS, WINDOW_CELLS, roi_map.channels), dtype=np.float32)
    close_idx = np.flatnonzero(close_mask)
    far_idx = np.flatnonzero(~close_mask)
    if len(close_idx):
        neg_x[close_idx] = close_feat.featurize([negatives[i] for i in close_idx])
    if len(far_idx):
        neg_x[far_idx] = far_feat.featurize([negatives[i] for i in far_idx])
    forwards += far_feat.forwards
    if isinstance(pos_feat, PatchFeaturizer):
        forwards += pos_feat.forwards
    timings["featurize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    train_heads(model, pos_x, neg_x, config.sgd(_lr_gain(model)), rng, loc_features=loc_x, loc_labels=loc_labels,
                miner=config.miner(), iterations=config.init_iterations)
    timings["train"] = time.perf_counter() - t0

    state.store.positive.add(0, pos_x)
    state.store.localization.add(0, loc_x, loc_labels)
    state.store.negative.add(0, neg_x)
    state.last_maps = scale_maps
    LOGGER.info(
        "Initialized on %dx%d frame: %d positives, %d localization, %d negatives (%d close / %d far), %d forwards",
        width, height, len(pos_x), len(loc_x), len(neg_x), len(close_idx), len(far_idx), forwards,
    )
    return InitResult(state=state, backbone_forwards=forwards, timings=timings,
                      close_negatives=len(close_idx), far_negatives=len(far_idx))


# ---------------------------------------------------------
# Coarse stage
# ---------------------------------------------------------

def select_by_overlap(boxes: Sequence[Box], scores: Sequence[float]) -> int:
    """Index maximizing the summed IoU with the other boxes; ties go to higher score, then lower index."""
    if not boxes:
        raise InputError("No boxes to select from")
    arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
    totals = []
    for i, box in enumerate(boxes):
        overlaps = iou_many(arr, box)
        overlaps[i] = 0.0
        totals.append(math.fsum(overlaps.tolist()))
    return min(range(len(boxes)), key=lambda i: (-totals[i], -float(scores[i]), i))


def _coarse_from_features(state: TrackerState, transform: CropTransform, offsets, features: np.ndarray
                          ) -> CoarseResult:
    cfg = state.config
    scores = np.asarray(state.model.object_scores(features), dtype=np.float64)
    best = float(scores.max()) if len(scores) else 0.0
    alive = np.flatnonzero(scores > cfg.score_threshold)
    if len(alive) == 0:
        return CoarseResult(box=None, best_score=best, survivors=0)
    classes = np.argmax(np.asarray(state.model.location_probs(features[alive])), axis=1)
    pitch_w = state.scale * state.base_size[0]
    pitch_h = state.scale * state.base_size[1]
    moved: List[Box] = []
    for idx, cls in zip(alive, classes):
        off = offsets[idx]
        cx = transform.center_x + off.kx * CELL_FRACTION * pitch_w
        cy = transform.center_y + off.ky * CELL_FRACTION * pitch_h
        ux, uy = LocClass(int(cls)).direction
        cx += ux * cfg.coarse_step * pitch_w
        cy += uy * cfg.coarse_step * pitch_h
        moved.append(Box.from_center(cx, cy, pitch_w, pitch_h))
    pick = select_by_overlap(moved, scores[alive])
    return CoarseResult(box=moved[pick], best_score=best, survivors=len(alive), index=int(alive[pick]))


def coarse_localize(state: TrackerState, roi_map: FeatureMap) -> CoarseResult:
    """Score every 3x3 window of the ROI map, move survivors by their location class, pick by overlap."""
    if roi_map.transform is None:
        raise ConfigurationError("ROI map carries no crop transform")
    offsets, features = candidate_grid_batch(roi_map, WINDOW_CELLS)
    return _coarse_from_features(state, roi_map.transform, offsets, features)


def clamp_to_hull(coarse: Box, transform: CropTransform, limit: float) -> Box:
    """Pull the box center to within `limit` cells of the transform center."""
    ox, oy = transform.cell_offset(*coarse.center)
    ox = min(max(ox, -limit), limit)
    oy = min(max(oy, -limit), limit)
    pitch_x, pitch_y = transform.cell_pitch
    return Box.from_center(transform.center_x + ox * pitch_x, transform.center_y + oy * pitch_y,
                           coarse.w, coarse.h)


# ---------------------------------------------------------
# Fine stage
# ---------------------------------------------------------

def fine_scale_draws(rng: np.random.Generator, config: TrackerConfig) -> np.ndarray:
    draws = rng.normal(1.0, config.fine_scale_sigma, config.fine_scale_draws)
    return np.clip(draws, 1.0 / config.fine_scale_step, config.fine_scale_step)


def fine_candidates(state: TrackerState, coarse: Box, rel_scales: Sequence[float]) -> List[Tuple[Box, float]]:
    """Lattice boxes around `coarse`, enumerated scale outer, then dy, then dx."""
    cx, cy = coarse.center
    pitch_x = CELL_FRACTION * state.scale * state.base_size[0]
    pitch_y = CELL_FRACTION * state.scale * state.base_size[1]
    out: List[Tuple[Box, float]] = []
    for rel in rel_scales:
        w = float(rel) * state.scale * state.base_size[0]
        h = float(rel) * state.scale * state.base_size[1]
        for dy in state.config.fine_offsets:
            for dx in state.config.fine_offsets:
                out.append((Box.from_center(cx + dx * pitch_x, cy + dy * pitch_y, w, h), float(rel)))
    return out


def select_fine(candidates: Sequence[Tuple[Box, float]], scores: np.ndarray, top: int) -> Tuple[Box, float, float]:
    """Mean box, mean relative scale and mean score of the `top` best candidates (stable order)."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")[:top]
    boxes = np.array([candidates[i][0].as_tuple() for i in order], dtype=np.float64)
    rel = float(np.mean([candidates[i][1] for i in order]))
    x, y, w, h = boxes.mean(axis=0)
    return Box(float(x), float(y), float(w), float(h)), rel, float(np.mean(np.asarray(scores)[order]))


def fine_maps(state: TrackerState, frame: np.ndarray, coarse: Box, roi_map: FeatureMap) -> ScaledMapSet:
    """Scale set {1/1.05, 1, 1.05}: two fresh 139 crops around `coarse` plus the ROI map."""
    step = state.config.fine_scale_step
    cx, cy = coarse.center
    lo = _forward(state, frame, _crop_transform(state, cx, cy, state.scale / step, SCALE_SIDE), 1.0 / step)
    hi = _forward(state, frame, _crop_transform(state, cx, cy, state.scale * step, SCALE_SIDE), step)
    roi = FeatureMap(roi_map.values, scale=1.0, transform=roi_map.transform)
    return ScaledMapSet([(1.0 / step, lo), (1.0, roi), (step, hi)])


def fine_localize(state: TrackerState, frame: np.ndarray, coarse: Box,
                  roi_map: Optional[FeatureMap] = None) -> Tuple[FineResult, object, int]:
    """Score the fine lattice around `coarse`; returns the result, the featurizer used and forwards spent."""
    cfg = state.config
    rel_scales = fine_scale_draws(state.rng, cfg)
    candidates = fine_candidates(state, coarse, rel_scales)
    if cfg.feature_reuse:
        if roi_map is None:
            raise ConfigurationError("Feature reuse needs the frame's ROI map")
        featurizer = MapFeaturizer(fine_maps(state, frame, coarse, roi_map), state.scale, state.base_size)
        forwards = 2
    else:
        featurizer = PatchFeaturizer(state.model, frame, cfg.pad_value)
        forwards = 0
    feats = featurizer.featurize([b for b, _ in candidates])
    if isinstance(featurizer, PatchFeaturizer):
        forwards += featurizer.forwards
    scores = np.asarray(state.model.object_scores(feats), dtype=np.float64)
    box, rel, score = select_fine(candidates, scores, cfg.fine_top)
    return FineResult(box=box, scale=state.scale * rel, score=score), featurizer, forwards


# ---------------------------------------------------------
# Sample collection and updates
# ---------------------------------------------------------

def collect_samples(state: TrackerState, estimated: Box, score: float, featurizer,
                    negative_featurizer=None) -> bool:
    """Add this frame's positive, localization and background features; False when nothing was added."""
    cfg = state.config
    if score <= cfg.score_threshold:
        return False
    neg_feat = negative_featurizer or featurizer
    try:
        reach = featurizer.predicate()
        positives = sample_gaussian_boxes(state.rng, estimated, cfg.pos_trans_sigma, cfg.online_scale_sigma,
                                          cfg.frame_pos, iou_above(estimated, cfg.pos_iou) & reach)
        loc_boxes, loc_labels = _sample_loc_boxes(state.rng, estimated, cfg.frame_loc, cfg, reach)
        negatives = sample_gaussian_boxes(state.rng, estimated, cfg.online_neg_trans_sigma,
                                          cfg.online_scale_sigma, cfg.frame_neg,
                                          iou_below(estimated, cfg.neg_iou) & neg_feat.predicate())
    except SamplingError as exc:
        LOGGER.warning("Frame %d: skipping sample collection (%s)", state.frame_index, exc)
        return False
    frame = state.frame_index
    state.store.positive.add(frame, featurizer.featurize(positives))
    state.store.localization.add(frame, featurizer.featurize(loc_boxes), loc_labels)
    state.store.negative.add(frame, neg_feat.featurize(negatives))
    LOGGER.debug("Frame %d: banks now %s", frame, state.store.sizes())
    return True


def scheduled_updates(frame_index: int, score: float, config: TrackerConfig) -> List[str]:
    """Update kinds due on this frame, in run order."""
    kinds = []
    if score < config.score_threshold:
        kinds.append("short")
    if frame_index % config.long_term_interval == 0:
        kinds.append("long")
    return kinds


def maybe_update(state: TrackerState, score: float) -> List[str]:
    """Run the short- and long-term head updates due on the current frame; returns the kinds that ran."""
    cfg = state.config
    ran: List[str] = []
    for kind in scheduled_updates(state.frame_index, score, cfg):
        window = cfg.short_window if kind == "short" else cfg.long_window
        pos, _ = state.store.positive.recent(window)
        neg, _ = state.store.negative.recent()
        loc, loc_labels = state.store.localization.recent(window)
        if len(pos) == 0:
            LOGGER.warning("Frame %d: %s-term update skipped, positive bank empty", state.frame_index, kind)
            continue
        if len(neg) == 0:
            LOGGER.warning("Frame %d: %s-term update skipped, negative bank empty", state.frame_index, kind)
            continue
        try:
            train_heads(state.model, pos, neg, cfg.sgd(_lr_gain(state.model)), state.rng,
                        loc_features=loc if len(loc) else None, loc_labels=loc_labels,
                        miner=cfg.miner(), iterations=cfg.online_iterations)
        except TrainingError as exc:
            LOGGER.warning("Frame %d: %s-term update incomplete: %s", state.frame_index, kind, exc)
        LOGGER.info("Frame %d: %s-term update on %d positives / %d negatives",
                    state.frame_index, kind, len(pos), len(neg))
        ran.append(kind)
    return ran


# ---------------------------------------------------------
# Per-frame driver
# ---------------------------------------------------------

def _clip_center(box: Box, size: Tuple[int, int]) -> Box:
    cx, cy = box.center
    width, height = size
    return Box.from_center(min(max(cx, 0.0), float(width)), min(max(cy, 0.0), float(height)), box.w, box.h)


def track(state: TrackerState, frame: np.ndarray) -> FrameResult:
    """Localize the target in the next frame and adapt the heads."""
    cfg = state.config
    img = _frame_array(frame)
    if (img.shape[1], img.shape[0]) != state.image_size:
        raise InputError(f"Frame is {img.shape[1]}x{img.shape[0]}, sequence is {state.image_size[0]}x{state.image_size[1]}")
    state.frame_index += 1
    timings: Dict[str, float] = {}
    forwards = 0
    roi_t = roi_transform(state)

    t0 = time.perf_counter()
    roi_map: Optional[FeatureMap] = None
    if cfg.feature_reuse:
        roi_map = _forward(state, img, roi_t, 1.0)
        forwards += 1
    timings["roi_forward"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if roi_map is not None:
        coarse = coarse_localize(state, roi_map)
    else:
        coarse, brute_forwards = _coarse_brute_force(state, img, roi_t)
        forwards += brute_forwards
    # one cell short of the grid edge keeps the fine lattice inside the ROI map
    limit = _roi_cells(state) // 2 - WINDOW_CELLS // 2 - 1
    timings["coarse"] = time.perf_counter() - t0

    updates: List[str] = []
    collected = False
    if coarse.box is None:
        LOGGER.debug("Frame %d: no window above %.2f (best %.3f), holding box",
                     state.frame_index, cfg.score_threshold, coarse.best_score)
        result_box, result_scale, score = state.box, state.scale, coarse.best_score
        timings["fine"] = 0.0
        timings["collect"] = 0.0
    else:
        t0 = time.perf_counter()
        coarse_box = clamp_to_hull(coarse.box, roi_t, float(limit))
        fine, featurizer, fine_forwards = fine_localize(state, img, coarse_box, roi_map)
        forwards += fine_forwards
        timings["fine"] = time.perf_counter() - t0
        result_box = _clip_center(fine.box, state.image_size)
        result_scale, score = fine.scale, fine.score

        t0 = time.perf_counter()
        neg_featurizer = None
        if isinstance(featurizer, MapFeaturizer) and roi_map is not None:
            step = cfg.fine_scale_step
            neg_featurizer = MapFeaturizer(ScaledMapSet([(1.0, featurizer.scale_set.maps[1])]), state.scale,
                                           state.base_size, scale_range=(1.0 / step, step))
        collected = collect_samples(state, result_box, score, featurizer, neg_featurizer)
        if isinstance(featurizer, PatchFeaturizer):
            forwards += featurizer.forwards - fine_forwards
        elif isinstance(featurizer, MapFeaturizer):
            state.last_maps = featurizer.scale_set
        timings["collect"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    updates = maybe_update(state, score)
    timings["update"] = time.perf_counter() - t0

    state.box = result_box
    state.scale = result_scale
    LOGGER.debug("Frame %d: box=%s score=%.3f forwards=%d", state.frame_index,
                 tuple(round(v, 1) for v in result_box.as_tuple()), score, forwards)
    return FrameResult(
        frame_index=state.frame_index, box=result_box, score=float(score), scale=float(result_scale),
        detected=coarse.box is not None, backbone_forwards=forwards, survivors=coarse.survivors,
        updates=updates, timings=timings, collected=collected,
    )


def _roi_cells(state: TrackerState) -> int:
    spec = getattr(state.model, "spec", None)
    return int(spec.output_side(ROI_SIDE)) if spec is not None else 15


def _coarse_brute_force(state: TrackerState, frame: np.ndarray, roi_t: CropTransform
                        ) -> Tuple[CoarseResult, int]:
    """Coarse stage with every candidate forwarded from its own patch."""
    k = _roi_cells(state) // 2 - WINDOW_CELLS // 2
    offsets = [GridOffset(kx, ky) for ky in range(-k, k + 1) for kx in range(-k, k + 1)]
    pitch_x, pitch_y = roi_t.cell_pitch
    w = state.scale * state.base_size[0]
    h = state.scale * state.base_size[1]
    boxes = [Box.from_center(roi_t.center_x + o.kx * pitch_x, roi_t.center_y + o.ky * pitch_y, w, h)
             for o in offsets]
    featurizer = PatchFeaturizer(state.model, frame, state.config.pad_value)
    features = featurizer.featurize(boxes)
    return _coarse_from_features(state, roi_t, offsets, features), featurizer.forwards


def run_sequence(frames: Sequence[np.ndarray], init_box: Box, config: TrackerConfig, model: ScoringModel,
                 on_frame: Optional[Callable[[FrameResult], None]] = None
                 ) -> Tuple[InitResult, List[FrameResult]]:
    """Initialize on frames[0] and track the rest."""
    if len(frames) < 1:
        raise InputError("Sequence has no frames")
    t0 = time.perf_counter()
    started = init(frames[0], init_box, config, model)
    started.timings["total"] = time.perf_counter() - t0
    results: List[FrameResult] = []
    for frame in frames[1:]:
        t0 = time.perf_counter()
        res = track(started.state, frame)
        res.timings["total"] = time.perf_counter() - t0
        results.append(res)
        if on_frame is not None:
            on_frame(res)
    return started, results
