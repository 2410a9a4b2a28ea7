"""Sequences on disk and in memory, synthetic sequences, OPE metrics and result files."""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence as SequenceT, Tuple, Union

import numpy as np
from PIL import Image, ImageFilter

import path_utils
from errors import IngestionError, InputError, ResultsWriteError, SynthSpecError
from geometry import Box, center_error, iou

LOGGER = logging.getLogger("ilnet.eval_io")

GROUNDTRUTH_FILE = "groundtruth_rect.txt"
FRAME_DIR = "img"
PNM_SUFFIXES = (".pgm", ".ppm")
PNG_SUFFIX = ".png"

PRECISION_THRESHOLDS = [float(t) for t in range(51)]
SUCCESS_THRESHOLDS = [i / 20.0 for i in range(21)]
PRECISION_AT = 20.0

_SPLIT_RE = re.compile(r"[,\t ]+")


@dataclass
class Sequence:
    name: str
    frames: List[np.ndarray]
    truth: Optional[List[Box]] = None
    source: Optional[str] = None

    def __post_init__(self):
        if len(self.frames) < 2:
            raise InputError(f"Sequence '{self.name}' needs at least 2 frames, got {len(self.frames)}")
        shape = self.frames[0].shape
        for i, frame in enumerate(self.frames):
            if frame.shape != shape:
                raise InputError(f"Frame {i} of '{self.name}' is {frame.shape}, expected {shape}")
        if self.truth is not None and len(self.truth) != len(self.frames):
            raise InputError(
                f"Sequence '{self.name}' has {len(self.frames)} frames but {len(self.truth)} ground-truth boxes"
            )

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> Tuple[int, int]:
        """(width, height)"""
        return self.frames[0].shape[1], self.frames[0].shape[0]


# ---------------------------------------------------------
# Loading / saving
# ---------------------------------------------------------

def _frame_number(path: Path) -> int:
    try:
        return int(path.stem)
    except ValueError:
        raise IngestionError("Frame file name is not a number", path=path)


def _read_frame(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            return np.asarray(img, dtype=np.uint8).copy()
    except OSError as exc:
        raise IngestionError(f"Unreadable image: {exc}", path=path)


def parse_groundtruth(path: Path) -> List[Box]:
    """OTB annotations: one "x,y,w,h" per line (comma, tab or space separated), 1-based origin."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise IngestionError("Ground-truth file missing", path=path)
    boxes: List[Box] = []
    for number, line in enumerate(lines, start=1):
        text = line.strip()
        if not text:
            continue
        parts = [p for p in _SPLIT_RE.split(text) if p]
        if len(parts) != 4:
            raise IngestionError(f"Expected 4 values, got {len(parts)}", path=path, line=number)
        try:
            x, y, w, h = (float(p) for p in parts)
        except ValueError:
            raise IngestionError(f"Unparsable values '{text}'", path=path, line=number)
        if not all(math.isfinite(v) for v in (x, y, w, h)) or w <= 0 or h <= 0:
            raise IngestionError(f"Invalid box '{text}'", path=path, line=number)
        boxes.append(Box(x - 1.0, y - 1.0, w, h))
    return boxes


def load_sequence(path: Union[str, Path]) -> Sequence:
    root = Path(path)
    img_dir = root / FRAME_DIR
    if not img_dir.is_dir():
        raise IngestionError("Missing img/ directory", path=img_dir)
    suffixes = PNM_SUFFIXES + ((PNG_SUFFIX,) if path_utils.png_enabled() else ())
    files = [p for p in img_dir.iterdir() if p.is_file() and p.suffix.lower() in suffixes]
    skipped_png = [p for p in img_dir.iterdir() if p.suffix.lower() == PNG_SUFFIX] if PNG_SUFFIX not in suffixes else []
    if skipped_png and not files:
        raise IngestionError(
            f"Only PNG frames found; set {path_utils.ALLOW_PNG_ENV}=1 to read them", path=img_dir
        )
    files.sort(key=_frame_number)
    frames = [_read_frame(p) for p in files]
    if len(frames) < 2:
        raise IngestionError(f"Need at least 2 frames, found {len(frames)}", path=img_dir)
    shape = frames[0].shape
    for p, frame in zip(files, frames):
        if frame.shape != shape:
            raise IngestionError(f"Frame size {frame.shape} differs from {shape}", path=p)
    gt_path = root / GROUNDTRUTH_FILE
    truth = parse_groundtruth(gt_path)
    if len(truth) != len(frames):
        raise IngestionError(f"{len(truth)} annotations for {len(frames)} frames", path=gt_path)
    LOGGER.info("Loaded sequence %s: %d frames of %dx%d", root.name, len(frames), shape[1], shape[0])
    return Sequence(name=root.name, frames=frames, truth=truth, source=str(root))


def _fmt(value: float) -> str:
    return format(float(value), ".10g")


def save_sequence(seq: Sequence, out_dir: Union[str, Path]) -> Path:
    """Write frames as img/0001.pgm (or .ppm) plus a 1-based groundtruth_rect.txt."""
    root = Path(out_dir)
    img_dir = root / FRAME_DIR
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        for i, frame in enumerate(seq.frames, start=1):
            arr = np.asarray(frame, dtype=np.uint8)
            if arr.ndim == 3 and arr.shape[2] == 1:
                arr = arr[:, :, 0]
            suffix = ".pgm" if arr.ndim == 2 else ".ppm"
            Image.fromarray(arr).save(img_dir / f"{i:04d}{suffix}")
        if seq.truth is not None:
            lines = [",".join(_fmt(v) for v in (b.x + 1.0, b.y + 1.0, b.w, b.h)) for b in seq.truth]
            (root / GROUNDTRUTH_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ResultsWriteError(root, exc)
    LOGGER.info("Wrote %d frames to %s", len(seq.frames), root)
    return root


# ---------------------------------------------------------
# Synthetic sequences
# ---------------------------------------------------------

MOTIONS = ("linear", "sinusoidal")


@dataclass
class SynthSpec:
    width: int = 320
    height: int = 240
    frames: int = 60
    init_box: Tuple[float, float, float, float] = (136.0, 96.0, 48.0, 48.0)
    motion: str = "linear"
    velocity: Tuple[float, float] = (2.0, 1.0)        # px per frame
    amplitude: Tuple[float, float] = (40.0, 20.0)     # px, sinusoidal only
    period: float = 40.0                               # frames, sinusoidal only
    scale_drift: float = 1.0                           # size multiplier per frame
    background_seed: int = 1
    target_seed: int = 2
    blur_sigma: float = 2.0
    channels: int = 1
    name: str = "synthetic"

    def validate(self) -> None:
        if self.width < 32 or self.height < 32:
            raise SynthSpecError(f"Frame {self.width}x{self.height} too small")
        if self.frames < 2:
            raise SynthSpecError(f"Need at least 2 frames, got {self.frames}")
        if self.motion not in MOTIONS:
            raise SynthSpecError(f"Unknown motion '{self.motion}'. Available: {', '.join(MOTIONS)}")
        if self.channels not in (1, 3):
            raise SynthSpecError("channels must be 1 or 3")
        if self.scale_drift <= 0 or self.blur_sigma < 0 or self.period <= 0:
            raise SynthSpecError("scale_drift and period must be positive, blur_sigma non-negative")
        for t in range(self.frames):
            box = self.box_at(t)
            if box.w < 16 or box.h < 16:
                raise SynthSpecError(f"Target shrinks to {box.w:g}x{box.h:g} px at frame {t} (minimum 16)")
            if box.x < 0 or box.y < 0 or box.x + box.w > self.width or box.y + box.h > self.height:
                raise SynthSpecError(f"Target leaves the {self.width}x{self.height} frame at frame {t}")

    def center_at(self, t: int) -> Tuple[float, float]:
        x, y, w, h = self.init_box
        cx, cy = x + w / 2.0, y + h / 2.0
        if self.motion == "linear":
            return cx + self.velocity[0] * t, cy + self.velocity[1] * t
        phase = 2.0 * math.pi * t / self.period
        return cx + self.amplitude[0] * math.sin(phase), cy + self.amplitude[1] * math.sin(phase)

    def box_at(self, t: int) -> Box:
        """Analytic target box at frame t, snapped to pixels by round-half-up."""
        _, _, w0, h0 = self.init_box
        grow = self.scale_drift ** t
        w, h = round_half_up(w0 * grow), round_half_up(h0 * grow)
        if w < 1 or h < 1:
            raise SynthSpecError(f"Target vanishes at frame {t}")
        cx, cy = self.center_at(t)
        return Box(float(round_half_up(cx - w / 2.0)), float(round_half_up(cy - h / 2.0)), float(w), float(h))

    def to_dict(self) -> Dict[str, object]:
        data = asdict(self)
        for key in ("init_box", "velocity", "amplitude"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SynthSpecError(f"Unknown synth spec key(s): {', '.join(unknown)}")
        values = dict(data)
        for key in ("init_box", "velocity", "amplitude"):
            if key in values:
                values[key] = tuple(float(v) for v in values[key])  # type: ignore[union-attr]
        spec = cls(**values)  # type: ignore[arg-type]
        spec.validate()
        return spec


def load_synth_spec(path: Union[str, Path]) -> SynthSpec:
    source = Path(path)
    try:
        data = json.loads(source.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise SynthSpecError(f"Synth spec not found: {source}")
    except json.JSONDecodeError as e:
        raise SynthSpecError(f"Invalid JSON in {source}: {e}")
    if not isinstance(data, dict):
        raise SynthSpecError(f"Synth spec {source} must hold a JSON object")
    return SynthSpec.from_dict(data)


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _blurred_noise(rng: np.random.Generator, width: int, height: int, sigma: float) -> np.ndarray:
    noise = rng.integers(0, 256, size=(height, width), dtype=np.uint8)
    img = Image.fromarray(noise)
    if sigma > 0:
        img = img.filter(ImageFilter.GaussianBlur(radius=sigma))
    arr = np.asarray(img, dtype=np.float64)
    std = arr.std()
    if std > 0:
        arr = (arr - arr.mean()) / std * 40.0 + 128.0
    return np.clip(arr, 0, 255)


def _target_texture(rng: np.random.Generator, channels: int) -> np.ndarray:
    return rng.integers(0, 256, size=(6, 6, channels), dtype=np.uint8)


def _render_target(texture: np.ndarray, w: int, h: int) -> np.ndarray:
    planes = []
    for c in range(texture.shape[2]):
        plane = Image.fromarray(texture[:, :, c]).resize((w, h), Image.NEAREST)
        planes.append(np.asarray(plane, dtype=np.float64))
    patch = np.stack(planes, axis=2)
    patch[:2, :, :] = 255.0
    patch[-2:, :, :] = 255.0
    patch[:, :2, :] = 255.0
    patch[:, -2:, :] = 255.0
    return patch


def synth_sequence(spec: SynthSpec) -> Sequence:
    """Blurred-noise background with a bordered texture moving along the SynthSpec path."""
    spec.validate()
    bg_rng = np.random.default_rng(spec.background_seed)
    background = np.stack(
        [_blurred_noise(bg_rng, spec.width, spec.height, spec.blur_sigma) for _ in range(spec.channels)], axis=2
    )
    texture = _target_texture(np.random.default_rng(spec.target_seed), spec.channels)
    frames: List[np.ndarray] = []
    truth: List[Box] = []
    for t in range(spec.frames):
        box = spec.box_at(t)
        frame = background.copy()
        x, y, w, h = (int(v) for v in box.as_tuple())
        frame[y:y + h, x:x + w, :] = _render_target(texture, w, h)
        out = np.clip(np.round(frame), 0, 255).astype(np.uint8)
        frames.append(out[:, :, 0] if spec.channels == 1 else out)
        truth.append(box)
    return Sequence(name=spec.name, frames=frames, truth=truth, source="synthetic")


# ---------------------------------------------------------
# OPE metrics
# ---------------------------------------------------------

@dataclass
class OpeResult:
    precision_thresholds: List[float]
    precision_curve: List[float]
    precision_20: float
    success_thresholds: List[float]
    success_curve: List[float]
    auc: float
    frames: int
    mean_iou: float = 0.0
    min_iou: float = 0.0
    mean_center_error: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


def ope_evaluate(estimates: SequenceT[Box], truth: SequenceT[Box]) -> OpeResult:
    """One-pass evaluation: precision (center error <= t) and success (IoU > t) curves."""
    if len(estimates) != len(truth):
        raise InputError(f"{len(estimates)} estimates for {len(truth)} ground-truth boxes")
    if not estimates:
        raise InputError("Nothing to evaluate")
    errors = np.array([center_error(e, g) for e, g in zip(estimates, truth)], dtype=np.float64)
    overlaps = np.array([iou(e, g) for e, g in zip(estimates, truth)], dtype=np.float64)
    n = len(errors)
    precision = [float(np.count_nonzero(errors <= t)) / n for t in PRECISION_THRESHOLDS]
    success = [float(np.count_nonzero(overlaps > t)) / n for t in SUCCESS_THRESHOLDS]
    return OpeResult(
        precision_thresholds=list(PRECISION_THRESHOLDS),
        precision_curve=precision,
        precision_20=float(np.count_nonzero(errors <= PRECISION_AT)) / n,
        success_thresholds=list(SUCCESS_THRESHOLDS),
        success_curve=success,
        auc=math.fsum(success) / len(success),
        frames=n,
        mean_iou=float(overlaps.mean()),
        min_iou=float(overlaps.min()),
        mean_center_error=float(errors.mean()),
    )


# ---------------------------------------------------------
# Result files
# ---------------------------------------------------------

BOX_HEADERS = ["frame", "x", "y", "w", "h", "score"]


@dataclass
class ResultPaths:
    boxes: Path
    metrics: Optional[Path] = None
    timings: Optional[Path] = None
    curves: Optional[Path] = None
    extra: Dict[str, Path] = field(default_factory=dict)


def _write_json(path: Path, data: object) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_results(out_dir: Union[str, Path], boxes: SequenceT[Box], scores: SequenceT[float],
                  metrics: Optional[OpeResult] = None,
                  timings: Optional[Dict[str, float]] = None) -> ResultPaths:
    """boxes.csv, metrics.json and curves.csv (when metrics are given) and timings.json."""
    if len(boxes) != len(scores):
        raise InputError(f"{len(boxes)} boxes but {len(scores)} scores")
    root = Path(out_dir)
    paths = ResultPaths(boxes=root / "boxes.csv")
    current = root
    try:
        root.mkdir(parents=True, exist_ok=True)
        current = paths.boxes
        with paths.boxes.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(BOX_HEADERS)
            for i, (box, score) in enumerate(zip(boxes, scores)):
                writer.writerow([i, f"{box.x:.4f}", f"{box.y:.4f}", f"{box.w:.4f}", f"{box.h:.4f}", f"{score:.6f}"])
        if metrics is not None:
            paths.metrics = current = root / "metrics.json"
            _write_json(paths.metrics, metrics.to_dict())
            paths.curves = current = root / "curves.csv"
            with paths.curves.open("w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["plot", "threshold", "value"])
                for t, v in zip(metrics.precision_thresholds, metrics.precision_curve):
                    writer.writerow(["precision", repr(t), repr(v)])
                for t, v in zip(metrics.success_thresholds, metrics.success_curve):
                    writer.writerow(["success", repr(t), repr(v)])
        if timings is not None:
            paths.timings = current = root / "timings.json"
            _write_json(paths.timings, timings)
    except OSError as exc:
        raise ResultsWriteError(current, exc)
    LOGGER.info("Wrote results for %d frames to %s", len(boxes), root)
    return paths


def read_metrics(path: Union[str, Path]) -> OpeResult:
    source = Path(path)
    try:
        data = json.loads(source.read_text(encoding="utf-8"))
        return OpeResult(**data)
    except FileNotFoundError:
        raise IngestionError("metrics file missing", path=source)
    except (json.JSONDecodeError, TypeError) as exc:
        raise IngestionError(f"Malformed metrics: {exc}", path=source)


def read_boxes(path: Union[str, Path]) -> Tuple[List[Box], List[float]]:
    source = Path(path)
    boxes: List[Box] = []
    scores: List[float] = []
    with source.open(newline="", encoding="utf-8") as f:
        for line, row in enumerate(csv.DictReader(f), start=2):
            try:
                boxes.append(Box(float(row["x"]), float(row["y"]), float(row["w"]), float(row["h"])))
                scores.append(float(row["score"]))
            except (KeyError, ValueError) as exc:
                raise IngestionError(f"Bad row: {exc}", path=source, line=line)
    return boxes, scores
