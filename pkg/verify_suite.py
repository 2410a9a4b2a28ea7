"""Oracle checks run by `verify`: each compares a fast path against brute force and records the gap."""
from __future__ import annotations

import contextlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageFilter

from backbone_nn import (
    FeatureMap,
    HardNegativeMiner,
    build_backbone_spec,
    count_flops,
    head_loss_and_grads,
    init_model,
    load_weights,
    save_weights,
)
from errors import ConfigurationError
from eval_io import PRECISION_THRESHOLDS, SUCCESS_THRESHOLDS, ope_evaluate
from feature_interp import (
    GridOffset,
    ScaledMapSet,
    candidate_grid,
    corrupted_bilinear,
    extract_window,
    interp_scale,
    sample_window_bilinear,
)
from geometry import Box, CropTransform, center_error, crop_patch, iou
from tracker import ROI_SIDE, SCALE_SIDE, PATCH_SIDE, TrackerConfig, scheduled_updates

LOGGER = logging.getLogger("ilnet.verify")


@dataclass
class CheckResult:
    name: str
    tolerance: float
    observed: float
    passed: bool
    details: Dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


@dataclass
class VerifyContext:
    seed: int = 0
    backbone: str = "desk"
    instances: int = 100
    fidelity_samples: int = 24
    fidelity_blur: float = 8.0


CheckFn = Callable[[VerifyContext], CheckResult]
CHECKS: Dict[str, CheckFn] = {}


def register(name: str) -> Callable[[CheckFn], CheckFn]:
    def wrap(fn: CheckFn) -> CheckFn:
        CHECKS[name] = fn
        return fn
    return wrap


def _result(name: str, tolerance: float, observed: float, *, higher_is_better: bool = False,
            **details: object) -> CheckResult:
    passed = observed >= tolerance if higher_is_better else observed <= tolerance
    return CheckResult(name=name, tolerance=float(tolerance), observed=float(observed), passed=bool(passed),
                       details=dict(details))


def _blurred_image(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    noise = rng.integers(0, 256, size=(size, size), dtype=np.uint8)
    img = np.asarray(Image.fromarray(noise).filter(ImageFilter.GaussianBlur(radius=sigma)), dtype=np.float64)
    img = (img - img.mean()) / max(img.std(), 1e-9) * 40.0 + 128.0
    return np.clip(img, 0, 255).astype(np.uint8)


@register("backbone_geometry")
def check_backbone_geometry(ctx: VerifyContext) -> CheckResult:
    spec = build_backbone_spec(ctx.backbone)
    sides = {side: spec.output_side(side) for side in (PATCH_SIDE, SCALE_SIDE, ROI_SIDE)}
    expected = {PATCH_SIDE: 3, SCALE_SIDE: 5, ROI_SIDE: 15}
    mismatches = sum(1 for side, n in sides.items() if n != expected[side])
    return _result("backbone_geometry", 0, mismatches, output_sides={str(k): v for k, v in sides.items()},
                   effective_stride=spec.effective_stride)


@register("candidate_count")
def check_candidate_count(ctx: VerifyContext) -> CheckResult:
    fmap = FeatureMap(np.zeros((15, 15, 1), dtype=np.float32))
    count = len(candidate_grid(fmap))
    return _result("candidate_count", 0, abs(count - 169), windows=count)


@register("integer_shift_equivalence")
def check_integer_shift(ctx: VerifyContext) -> CheckResult:
    """Window of the shared map vs forwarding the matching 107 px sub-crop."""
    spec = build_backbone_spec(ctx.backbone)
    rng = np.random.default_rng(ctx.seed)
    worst = 0.0
    compared = 0
    for i in range(ctx.instances):
        model = init_model(spec, seed=ctx.seed + i)
        side = ROI_SIDE if i == 0 else SCALE_SIDE
        crop = rng.integers(0, 256, size=(side, side, spec.in_channels)).astype(np.float32)
        shared = model.forward(crop)
        reach = shared.width // 2 - 1
        if i == 0:
            offsets = [(kx, ky) for ky in range(-reach, reach + 1) for kx in range(-reach, reach + 1)]
        else:
            offsets = [tuple(rng.integers(-reach, reach + 1, size=2))]
        for kx, ky in offsets:
            x0 = spec.effective_stride * (shared.width // 2 - 1 + kx)
            y0 = spec.effective_stride * (shared.height // 2 - 1 + ky)
            direct = model.forward(crop[y0:y0 + PATCH_SIDE, x0:x0 + PATCH_SIDE]).values
            window = extract_window(shared, int(kx), int(ky)).values
            sampled = sample_window_bilinear(shared, GridOffset(int(kx), int(ky))).values
            worst = max(worst, float(np.abs(window - direct).max()), float(np.abs(sampled - direct).max()))
            compared += 1
    return _result("integer_shift_equivalence", 1e-4, worst, windows_compared=compared)


@register("fractional_shift_fidelity")
def check_fractional_shift(ctx: VerifyContext) -> CheckResult:
    """Cosine similarity of bilinear sub-cell features vs re-forwarded displaced crops."""
    spec = build_backbone_spec(ctx.backbone)
    rng = np.random.default_rng(ctx.seed + 1)
    model = init_model(spec, seed=ctx.seed)
    image = _blurred_image(rng, 480, ctx.fidelity_blur)
    base = CropTransform(240.0, 240.0, 75.0, 75.0, 1.0, ROI_SIDE)
    roi = model.forward(crop_patch(image, base), transform=base)
    sims: List[float] = []
    for _ in range(ctx.fidelity_samples):
        kx, ky = (int(v) for v in rng.integers(-4, 5, size=2))
        dx, dy = (float(v) for v in rng.uniform(-0.5, 0.5, size=2))
        interp = sample_window_bilinear(roi, GridOffset(kx, ky, dx, dy)).flat().astype(np.float64)
        pitch_x, pitch_y = base.cell_pitch
        moved = base.recentered(base.center_x + (kx + dx) * pitch_x, base.center_y + (ky + dy) * pitch_y,
                                dest_side=PATCH_SIDE)
        direct = model.forward(crop_patch(image, moved)).flat().astype(np.float64)
        denom = np.linalg.norm(interp) * np.linalg.norm(direct)
        sims.append(float(interp @ direct / denom) if denom > 0 else 1.0)
    arr = np.asarray(sims)
    return _result("fractional_shift_fidelity", 0.95, float(arr.min()), higher_is_better=True,
                   cosine_min=float(arr.min()), cosine_median=float(np.median(arr)),
                   cosine_max=float(arr.max()), blur_sigma=ctx.fidelity_blur, samples=len(sims))


@register("bilinear_linearity")
def check_bilinear_linearity(ctx: VerifyContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 2)
    worst = 0.0
    for _ in range(20):
        f = rng.standard_normal((5, 5, 4)).astype(np.float32)
        g = rng.standard_normal((5, 5, 4)).astype(np.float32)
        a, b = rng.uniform(-2, 2, size=2)
        off = GridOffset(0, 0, *rng.uniform(-1, 1, size=2))
        mixed = sample_window_bilinear(FeatureMap(a * f + b * g), off).values.astype(np.float64)
        parts = (a * sample_window_bilinear(FeatureMap(f), off).values.astype(np.float64)
                 + b * sample_window_bilinear(FeatureMap(g), off).values.astype(np.float64))
        worst = max(worst, float(np.abs(mixed - parts).max()))
    return _result("bilinear_linearity", 1e-5, worst)


@register("scale_interpolation")
def check_scale_interpolation(ctx: VerifyContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 3)
    scales = (1 / 1.2, 1.0, 1.2)
    maps = [FeatureMap(rng.standard_normal((5, 5, 6)).astype(np.float32)) for _ in scales]
    scale_set = ScaledMapSet(list(zip(scales, maps)))
    zero = GridOffset(0, 0)
    endpoint = max(float(np.abs(interp_scale(scale_set, s, zero).values - m.values[1:4, 1:4]).max())
                   for s, m in zip(scales, maps))
    const = ScaledMapSet([(1.0, FeatureMap(np.full((5, 5, 2), 2.0, np.float32))),
                          (1.2, FeatureMap(np.full((5, 5, 2), 5.0, np.float32)))])
    midpoint = float(np.abs(interp_scale(const, 1.1, zero).values - 3.5).max())
    return _result("scale_interpolation", 1e-6, max(endpoint, midpoint), endpoint=endpoint, midpoint=midpoint)


def _numeric_grad_error(rng: np.random.Generator, dims: Sequence[int]) -> float:
    layers = [(rng.standard_normal((dims[i + 1], dims[i])) * 0.5, rng.standard_normal(dims[i + 1]) * 0.1)
              for i in range(len(dims) - 1)]
    x = rng.standard_normal((7, dims[0]))
    y = rng.integers(0, dims[-1], size=7)
    _, grads = head_loss_and_grads(layers, x, y)
    eps = 1e-6
    worst = 0.0
    for li, (w, b) in enumerate(layers):
        for param, grad in ((w, grads[li][0]), (b, grads[li][1])):
            flat = param.reshape(-1)
            gflat = grad.reshape(-1)
            for idx in rng.choice(flat.size, size=min(flat.size, 12), replace=False):
                keep = flat[idx]
                flat[idx] = keep + eps
                up, _ = head_loss_and_grads(layers, x, y)
                flat[idx] = keep - eps
                down, _ = head_loss_and_grads(layers, x, y)
                flat[idx] = keep
                numeric = (up - down) / (2 * eps)
                denom = max(abs(numeric) + abs(gflat[idx]), 1e-8)
                worst = max(worst, abs(numeric - gflat[idx]) / denom)
    return worst


@register("head_gradients")
def check_head_gradients(ctx: VerifyContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 4)
    obj = _numeric_grad_error(rng, (18, 10, 10, 2))
    loc = _numeric_grad_error(rng, (18, 10, 10, 5))
    return _result("head_gradients", 1e-3, max(obj, loc), object_head=obj, localization_head=loc)


@register("hard_mining")
def check_hard_mining(ctx: VerifyContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 5)
    miner = HardNegativeMiner(pool=1024, keep=96)
    violations = 0
    for _ in range(20):
        probs = rng.random(1024)
        probs[rng.integers(0, 1024, size=50)] = 0.5  # ties
        picked = miner.select(probs)
        rest = np.setdiff1d(np.arange(1024), picked)
        if len(picked) != 96 or probs[picked].min() < probs[rest].max():
            violations += 1
    return _result("hard_mining", 0, violations)


@register("update_schedule")
def check_update_schedule(ctx: VerifyContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 6)
    cfg = TrackerConfig()
    wrong = 0
    for frame, score in zip(range(1, 201), rng.random(200)):
        kinds = scheduled_updates(frame, float(score), cfg)
        wrong += ("long" in kinds) != (frame % 10 == 0)
        wrong += ("short" in kinds) != (score < 0.5)
    return _result("update_schedule", 0, wrong)


@register("ope_oracle")
def check_ope_oracle(ctx: VerifyContext) -> CheckResult:
    rng = np.random.default_rng(ctx.seed + 7)
    mismatches = 0
    for _ in range(ctx.instances):
        n = int(rng.integers(1, 30))
        truth = [Box(*rng.uniform(0, 100, 2), *rng.uniform(5, 60, 2)) for _ in range(n)]
        est = [Box(*rng.uniform(0, 100, 2), *rng.uniform(5, 60, 2)) for _ in range(n)]
        result = ope_evaluate(est, truth)
        precision = [sum(1 for e, g in zip(est, truth) if center_error(e, g) <= t) / n for t in PRECISION_THRESHOLDS]
        success = [sum(1 for e, g in zip(est, truth) if iou(e, g) > t) / n for t in SUCCESS_THRESHOLDS]
        if precision != result.precision_curve or success != result.success_curve:
            mismatches += 1
    return _result("ope_oracle", 0, mismatches)


@register("flop_ratio")
def check_flop_ratio(ctx: VerifyContext) -> CheckResult:
    spec = build_backbone_spec(ctx.backbone)
    patch = count_flops(spec, PATCH_SIDE).conv_macs
    roi = count_flops(spec, ROI_SIDE).conv_macs
    ratio = 169 * patch / roi
    return _result("flop_ratio", 10.0, ratio, higher_is_better=True, patch_macs=patch, roi_macs=roi)


@register("weight_roundtrip")
def check_weight_roundtrip(ctx: VerifyContext) -> CheckResult:
    spec = build_backbone_spec(ctx.backbone)
    model = init_model(spec, seed=ctx.seed)
    loaded = load_weights(save_weights(model), spec)
    diffs = sum(int(not np.array_equal(a, b)) for (_, a), (_, b) in zip(model.tensors(), loaded.tensors()))
    return _result("weight_roundtrip", 0, diffs, tensors=len(model.tensors()))


@contextlib.contextmanager
def _fault(fault: Optional[str]) -> Iterator[None]:
    if fault is None:
        yield
    elif fault == "bilinear":
        with corrupted_bilinear(0.25):
            yield
    else:
        raise ConfigurationError(f"Unknown fault '{fault}'")


def run_checks(ctx: VerifyContext, names: Optional[Sequence[str]] = None,
               fault: Optional[str] = None) -> List[CheckResult]:
    selected = list(names) if names else list(CHECKS)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise ConfigurationError(f"Unknown check(s): {', '.join(unknown)}")
    results = []
    with _fault(fault):
        for name in selected:
            result = CHECKS[name](ctx)
            LOGGER.info("%-28s %s observed=%.6g tolerance=%g", name, "PASS" if result.passed else "FAIL",
                        result.observed, result.tolerance)
            results.append(result)
    return results


def report(results: Sequence[CheckResult], ctx: VerifyContext) -> Dict[str, object]:
    return {
        "seed": ctx.seed,
        "backbone": ctx.backbone,
        "passed": all(r.passed for r in results),
        "checks": [r.to_dict() for r in results],
    }
