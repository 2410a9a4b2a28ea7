"""Convolutional backbone and fully connected heads: forward, head-only SGD, FLOPs, weight files."""
from __future__ import annotations

import copy
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigurationError, InputError, TrainingError, WeightFormatError
from geometry import CropTransform, LocClass

LOGGER = logging.getLogger("ilnet.backbone")

WEIGHT_MAGIC = b"ILNW"
WEIGHT_VERSION = 1
INPUT_SCALE = 128.0

OBJECT_CLASSES = ("background", "object")


# ---------------------------------------------------------
# Feature maps
# ---------------------------------------------------------

@dataclass
class FeatureMap:
    """(height, width, channels) grid of float32 values plus crop provenance.

    `offset` is the window displacement in cells (x, y) relative to the
    center of the map it was cut from; zero for full backbone outputs.
    """

    values: np.ndarray
    scale: float = 1.0
    transform: Optional[CropTransform] = None
    offset: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 3:
            raise ConfigurationError(f"FeatureMap needs (H, W, C) values, got shape {vals.shape}")
        if min(vals.shape) < 1:
            raise ConfigurationError(f"FeatureMap dimensions must be >= 1, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("FeatureMap holds non-finite values")
        self.values = vals

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


# ---------------------------------------------------------
# Layer specs
# ---------------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    name: str
    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    padding: int = 0


@dataclass(frozen=True)
class ReluLayer:
    name: str


@dataclass(frozen=True)
class MaxPoolLayer:
    name: str
    window: int
    stride: int


@dataclass(frozen=True)
class LrnLayer:
    name: str
    n: int = 5
    kappa: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75


Layer = Union[ConvLayer, ReluLayer, MaxPoolLayer, LrnLayer]

DESK_CHANNELS = (8, 16, 32)
VGGM_CHANNELS = (96, 256, 512)
DESK_LR_GAIN = 10.0


@dataclass
class ConvBackboneSpec:
    layers: List[Layer]
    head_hidden: int = 64
    name: str = "desk"
    # multiplies both head learning rates
    lr_gain: float = 1.0

    @classmethod
    def reference(cls, channels: Sequence[int] = DESK_CHANNELS, head_hidden: int = 64,
                  name: str = "desk", lrn: Optional[LrnLayer] = None,
                  in_channels: int = 3, lr_gain: float = 1.0) -> "ConvBackboneSpec":
        c1, c2, c3 = channels
        lrn = lrn or LrnLayer("lrn")
        layers: List[Layer] = [
            ConvLayer("conv1", 7, 2, in_channels, c1),
            ReluLayer("relu1"),
            LrnLayer("lrn1", lrn.n, lrn.kappa, lrn.alpha, lrn.beta),
            MaxPoolLayer("pool1", 3, 2),
            ConvLayer("conv2", 5, 2, c1, c2),
            ReluLayer("relu2"),
            LrnLayer("lrn2", lrn.n, lrn.kappa, lrn.alpha, lrn.beta),
            MaxPoolLayer("pool2", 3, 2),
            ConvLayer("conv3", 3, 1, c2, c3),
            ReluLayer("relu3"),
        ]
        return cls(layers=layers, head_hidden=head_hidden, name=name, lr_gain=lr_gain)

    @property
    def conv_layers(self) -> List[ConvLayer]:
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    @property
    def in_channels(self) -> int:
        return self.conv_layers[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.conv_layers[-1].out_channels

    @property
    def effective_stride(self) -> int:
        stride = 1
        for layer in self.layers:
            if isinstance(layer, (ConvLayer, MaxPoolLayer)):
                stride *= layer.stride
        return stride

    def output_side(self, side: int) -> int:
        """Output cells per axis for a square input of `side` pixels."""
        n = int(side)
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                n = _out_size(n + 2 * layer.padding, layer.kernel, layer.stride, layer.name)
            elif isinstance(layer, MaxPoolLayer):
                n = _out_size(n, layer.window, layer.stride, layer.name)
        return n

    def validate(self) -> None:
        channels = self.in_channels
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                if layer.in_channels != channels:
                    raise ConfigurationError(
                        f"{layer.name} expects {layer.in_channels} input channels, previous layer gives {channels}"
                    )
                if layer.kernel < 1 or layer.stride < 1 or layer.padding < 0:
                    raise ConfigurationError(f"{layer.name} has invalid kernel/stride/padding")
                channels = layer.out_channels
            elif isinstance(layer, MaxPoolLayer):
                if layer.window < 1 or layer.stride < 1:
                    raise ConfigurationError(f"{layer.name} has invalid window/stride")
        if self.head_hidden < 1:
            raise ConfigurationError("head_hidden must be >= 1")
        if self.lr_gain <= 0:
            raise ConfigurationError(f"lr_gain must be > 0, got {self.lr_gain}")


def build_backbone_spec(kind: str = "desk") -> ConvBackboneSpec:
    if kind == "desk":
        return ConvBackboneSpec.reference(DESK_CHANNELS, head_hidden=64, name="desk", lr_gain=DESK_LR_GAIN)
    if kind in ("vggm", "vggm-geometry"):
        return ConvBackboneSpec.reference(VGGM_CHANNELS, head_hidden=512, name="vggm-geometry")
    raise ConfigurationError(f"Unknown backbone '{kind}'. Available: desk, vggm-geometry")


def _out_size(n: int, k: int, s: int, name: str) -> int:
    if n < k:
        raise ConfigurationError(f"{name}: input side {n} smaller than window {k}")
    return (n - k) // s + 1


# ---------------------------------------------------------
# Parameters
# ---------------------------------------------------------

@dataclass
class ConvParams:
    weight: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray    # (out,)


@dataclass
class DenseLayer:
    name: str
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class HeadParams:
    """Fully connected stack, ReLU between layers, raw logits out of the last."""

    layers: List[DenseLayer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "HeadParams":
        return copy.deepcopy(self)

    def validate(self) -> None:
        if not self.layers:
            raise ConfigurationError("Head has no layers")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ConfigurationError(
                    f"{nxt.name} expects {nxt.in_dim} inputs but {prev.name} emits {prev.out_dim}"
                )


@dataclass
class NetworkModel:
    spec: ConvBackboneSpec
    conv: Dict[str, ConvParams]
    object_head: HeadParams
    loc_head: HeadParams
    pad_value: float = 128.0

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        out: List[Tuple[str, np.ndarray]] = []
        for layer in self.spec.conv_layers:
            params = self.conv[layer.name]
            out.append((f"{layer.name}.weight", params.weight))
            out.append((f"{layer.name}.bias", params.bias))
        for head in (self.object_head, self.loc_head):
            for dense in head.layers:
                out.append((f"{dense.name}.weight", dense.weight))
                out.append((f"{dense.name}.bias", dense.bias))
        return out

    def forward(self, crop: np.ndarray, *, scale: float = 1.0,
                transform: Optional[CropTransform] = None) -> "FeatureMap":
        return backbone_forward(crop, self.spec, self.conv, scale=scale, transform=transform,
                                pad_value=self.pad_value)

    def object_scores(self, features: np.ndarray) -> np.ndarray:
        """Positive-class probability for a batch of (N, 3, 3, C) features."""
        return softmax(head_forward(features, self.object_head))[..., 1]

    def location_probs(self, features: np.ndarray) -> np.ndarray:
        return softmax(head_forward(features, self.loc_head))


def _dense(name: str, n_in: int, n_out: int, rng: np.random.Generator, std: float) -> DenseLayer:
    return DenseLayer(
        name=name,
        weight=(rng.standard_normal((n_out, n_in)) * std).astype(np.float32),
        bias=np.zeros(n_out, dtype=np.float32),
    )


def build_head(names: Sequence[str], n_in: int, hidden: int, n_out: int,
               rng: np.random.Generator) -> HeadParams:
    dims = [n_in] + [hidden] * (len(names) - 1) + [n_out]
    layers = []
    for i, name in enumerate(names):
        last = i == len(names) - 1
        std = 0.01 if last else float(np.sqrt(2.0 / dims[i]))
        layers.append(_dense(name, dims[i], dims[i + 1], rng, std))
    return HeadParams(layers)


def init_model(spec: ConvBackboneSpec, seed: int = 0, pad_value: float = 128.0) -> NetworkModel:
    """Random conv weights (He init) and freshly initialized heads."""
    spec.validate()
    rng = np.random.default_rng(seed)
    conv: Dict[str, ConvParams] = {}
    for layer in spec.conv_layers:
        fan_in = layer.in_channels * layer.kernel * layer.kernel
        w = rng.standard_normal((layer.out_channels, layer.in_channels, layer.kernel, layer.kernel))
        conv[layer.name] = ConvParams(
            weight=(w * np.sqrt(2.0 / fan_in)).astype(np.float32),
            bias=np.zeros(layer.out_channels, dtype=np.float32),
        )
    feat_dim = 3 * 3 * spec.out_channels
    obj = build_head(("fc4", "fc5", "fc6"), feat_dim, spec.head_hidden, 2, rng)
    loc = build_head(("fc7", "fc8", "fc9"), feat_dim, spec.head_hidden, len(LocClass), rng)
    return NetworkModel(spec=spec, conv=conv, object_head=obj, loc_head=loc, pad_value=pad_value)


# ---------------------------------------------------------
# Forward
# ---------------------------------------------------------

def _conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int, padding: int,
            name: str = "conv") -> np.ndarray:
    if x.shape[2] != weight.shape[1]:
        raise ConfigurationError(
            f"{name}: input has {x.shape[2]} channels, kernel expects {weight.shape[1]}"
        )
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    kh, kw = weight.shape[2], weight.shape[3]
    if x.shape[0] < kh or x.shape[1] < kw:
        raise ConfigurationError(f"{name}: input {x.shape[:2]} smaller than kernel {(kh, kw)}")
    windows = sliding_window_view(x, (kh, kw), axis=(0, 1))[::stride, ::stride]
    out = np.tensordot(windows.astype(np.float64), weight.astype(np.float64),
                       axes=([2, 3, 4], [1, 2, 3]))
    out += bias.astype(np.float64)
    return out.astype(np.float32)


def _maxpool(x: np.ndarray, window: int, stride: int, name: str = "pool") -> np.ndarray:
    if x.shape[0] < window or x.shape[1] < window:
        raise ConfigurationError(f"{name}: window {window} larger than input {x.shape[:2]}")
    windows = sliding_window_view(x, (window, window), axis=(0, 1))[::stride, ::stride]
    return windows.max(axis=(3, 4))


def _lrn(x: np.ndarray, layer: LrnLayer) -> np.ndarray:
    sq = x.astype(np.float64) ** 2
    half = layer.n // 2
    padded = np.pad(sq, ((0, 0), (0, 0), (half, layer.n - 1 - half)))
    csum = np.concatenate([np.zeros(x.shape[:2] + (1,)), np.cumsum(padded, axis=2)], axis=2)
    window_sum = csum[:, :, layer.n:] - csum[:, :, :-layer.n]
    return (x / (layer.kappa + layer.alpha * window_sum) ** layer.beta).astype(np.float32)


def _apply_layer(x: np.ndarray, layer: Layer, conv: Optional[Dict[str, ConvParams]]) -> np.ndarray:
    if isinstance(layer, ConvLayer):
        if conv is None or layer.name not in conv:
            raise ConfigurationError(f"No weights for {layer.name}")
        params = conv[layer.name]
        if params.weight.shape != (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel):
            raise ConfigurationError(f"{layer.name}: weight shape {params.weight.shape} does not match spec")
        return _conv2d(x, params.weight, params.bias, layer.stride, layer.padding, layer.name)
    if isinstance(layer, ReluLayer):
        return np.maximum(x, 0.0).astype(np.float32)
    if isinstance(layer, MaxPoolLayer):
        return _maxpool(x, layer.window, layer.stride, layer.name)
    if isinstance(layer, LrnLayer):
        return _lrn(x, layer)
    raise ConfigurationError(f"Unsupported layer {layer!r}")


def conv_layer_forward(inp: FeatureMap, layer: ConvLayer, params: ConvParams) -> FeatureMap:
    out = _apply_layer(inp.values, layer, {layer.name: params})
    return FeatureMap(out, scale=inp.scale, transform=inp.transform)


def pool_relu_lrn_forward(inp: FeatureMap, layer: Union[ReluLayer, MaxPoolLayer, LrnLayer]) -> FeatureMap:
    if isinstance(layer, ConvLayer):
        raise ConfigurationError("Use conv_layer_forward for convolution layers")
    out = _apply_layer(inp.values, layer, None)
    return FeatureMap(out, scale=inp.scale, transform=inp.transform)


def normalize_crop(crop: np.ndarray, pad_value: float = 128.0) -> np.ndarray:
    return ((np.asarray(crop, dtype=np.float32) - np.float32(pad_value)) / np.float32(INPUT_SCALE)).astype(np.float32)


def backbone_forward(crop: np.ndarray, spec: ConvBackboneSpec, weights: Dict[str, ConvParams], *,
                     scale: float = 1.0, transform: Optional[CropTransform] = None,
                     pad_value: float = 128.0) -> FeatureMap:
    """Forward a (side, side, C) pixel crop through the conv stack; returns the conv3 map."""
    x = np.asarray(crop)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim == 3 and x.shape[2] == 1 and spec.in_channels > 1:
        # gray frames feed every input plane
        x = np.repeat(x, spec.in_channels, axis=2)
    if x.ndim != 3 or x.shape[2] != spec.in_channels:
        raise InputError(f"Crop must be (H, W, {spec.in_channels}), got {x.shape}")
    try:
        spec.output_side(min(x.shape[0], x.shape[1]))
    except ConfigurationError as exc:
        raise InputError(f"Crop {x.shape[:2]} too small for backbone '{spec.name}': {exc}") from exc
    fmap = FeatureMap(normalize_crop(x, pad_value), scale=scale, transform=transform)
    for layer in spec.layers:
        if isinstance(layer, ConvLayer):
            if layer.name not in weights:
                raise ConfigurationError(f"No weights for {layer.name}")
            fmap = conv_layer_forward(fmap, layer, weights[layer.name])
        else:
            fmap = pool_relu_lrn_forward(fmap, layer)
    return fmap


def _as_batch(features: Union[FeatureMap, np.ndarray]) -> Tuple[np.ndarray, bool]:
    if isinstance(features, FeatureMap):
        return features.flat()[None, :].astype(np.float64), True
    arr = np.asarray(features)
    if arr.ndim == 1:
        return arr[None, :].astype(np.float64), True
    if arr.ndim == 3:
        return arr.reshape(1, -1).astype(np.float64), True
    return arr.reshape(arr.shape[0], -1).astype(np.float64), False


def _head_arrays(head: Union[HeadParams, Sequence[Tuple[np.ndarray, np.ndarray]]]):
    if isinstance(head, HeadParams):
        return [(l.weight, l.bias) for l in head.layers]
    return list(head)


def _forward_cache(x: np.ndarray, layers) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
    inputs, pre = [], []
    a = x
    for i, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ np.asarray(w, dtype=np.float64).T + np.asarray(b, dtype=np.float64)
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return a, inputs, pre


def head_forward(features: Union[FeatureMap, np.ndarray], head: HeadParams) -> np.ndarray:
    """Raw logits; (L,) for a single feature map, (N, L) for a batch."""
    x, single = _as_batch(features)
    layers = _head_arrays(head)
    if x.shape[1] != layers[0][0].shape[1]:
        raise ConfigurationError(
            f"Feature dimension {x.shape[1]} does not match head input {layers[0][0].shape[1]}"
        )
    logits, _, _ = _forward_cache(x, layers)
    return logits[0] if single else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_loss_and_grads(head, x: np.ndarray, labels: np.ndarray
                        ) -> Tuple[float, List[Tuple[np.ndarray, np.ndarray]]]:
    """Mean softmax cross-entropy and its gradient w.r.t. every (weight, bias)."""
    x = np.asarray(x, dtype=np.float64).reshape(len(labels), -1)
    labels = np.asarray(labels, dtype=np.int64)
    layers = _head_arrays(head)
    logits, inputs, pre = _forward_cache(x, layers)
    probs = softmax(logits)
    n = len(labels)
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), labels], 1e-300))))
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    for i in range(len(layers) - 1, -1, -1):
        w = np.asarray(layers[i][0], dtype=np.float64)
        grads[i] = (delta.T @ inputs[i], delta.sum(axis=0))
        if i > 0:
            delta = (delta @ w) * (pre[i - 1] > 0)
    return loss, grads


# ---------------------------------------------------------
# Training
# ---------------------------------------------------------

@dataclass
class SgdConfig:
    lr_hidden: float = 1e-3
    lr_logits: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    object_batch: int = 128
    loc_batch: int = 65
    positives_per_batch: int = 32
    iterations: int = 90

    def validate(self) -> None:
        if self.lr_hidden < 0 or self.lr_logits < 0:
            raise ConfigurationError("Learning rates must be non-negative")
        if min(self.object_batch, self.loc_batch, self.positives_per_batch) < 1:
            raise ConfigurationError("Minibatch sizes must be >= 1")
        if self.positives_per_batch >= self.object_batch:
            raise ConfigurationError("positives_per_batch must leave room for negatives")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")

    @property
    def negatives_per_batch(self) -> int:
        return self.object_batch - self.positives_per_batch


class BatchCycler:
    """Walks shuffled permutations of range(n), reshuffling when one is used up."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._perm = rng.permutation(n)
        self._pos = 0

    def next(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._pos >= self.n:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = min(k, self.n - self._pos)
            out.append(self._perm[self._pos:self._pos + take])
            self._pos += take
            k -= take
        return np.concatenate(out)


class HardNegativeMiner:
    """Keeps the `keep` negatives the head scores most positive out of a `pool`-sized draw."""

    def __init__(self, pool: int = 1024, keep: int = 96):
        if keep < 1 or pool < keep:
            raise ConfigurationError(f"Mining needs 1 <= keep <= pool, got keep={keep} pool={pool}")
        self.pool = pool
        self.keep = keep

    def select(self, positive_probs: np.ndarray, keep: Optional[int] = None) -> np.ndarray:
        """Indices of the top-`keep` scores; ties resolved by position, result in position order."""
        k = min(keep or self.keep, len(positive_probs))
        order = np.argsort(-np.asarray(positive_probs, dtype=np.float64), kind="stable")
        return np.sort(order[:k])


class _MomentumSgd:
    def __init__(self, head: HeadParams, config: SgdConfig):
        self.head = head
        self.config = config
        self.velocity = [(np.zeros(l.weight.shape), np.zeros(l.bias.shape)) for l in head.layers]

    def step(self, grads: List[Tuple[np.ndarray, np.ndarray]]) -> None:
        cfg = self.config
        last = len(self.head.layers) - 1
        for i, (layer, (gw, gb)) in enumerate(zip(self.head.layers, grads)):
            lr = cfg.lr_logits if i == last else cfg.lr_hidden
            w64 = layer.weight.astype(np.float64)
            vw, vb = self.velocity[i]
            vw = cfg.momentum * vw + lr * (gw + cfg.weight_decay * w64)
            vb = cfg.momentum * vb + lr * gb
            self.velocity[i] = (vw, vb)
            layer.weight = (w64 - vw).astype(np.float32)
            layer.bias = (layer.bias.astype(np.float64) - vb).astype(np.float32)


@dataclass
class TrainingTrace:
    object_loss: List[float] = field(default_factory=list)
    loc_loss: List[float] = field(default_factory=list)


def _flat(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1)


def train_object_head(head: HeadParams, positives: np.ndarray, negatives: np.ndarray,
                      config: SgdConfig, rng: np.random.Generator,
                      miner: Optional[HardNegativeMiner] = None,
                      iterations: Optional[int] = None) -> Tuple[HeadParams, List[float]]:
    """Momentum SGD on the object head; mutates `head` in place and returns it with the loss trace."""
    config.validate()
    if len(positives) == 0:
        raise TrainingError(OBJECT_CLASSES[1])
    if len(negatives) == 0:
        raise TrainingError(OBJECT_CLASSES[0])
    pos = _flat(positives)
    neg = _flat(negatives)
    if pos.shape[1] != head.input_dim or neg.shape[1] != head.input_dim:
        raise ConfigurationError(f"Training features do not match head input {head.input_dim}")
    opt = _MomentumSgd(head, config)
    pos_cycle = BatchCycler(len(pos), rng)
    neg_cycle = BatchCycler(len(neg), rng)
    n_neg = config.negatives_per_batch
    losses: List[float] = []
    for _ in range(config.iterations if iterations is None else iterations):
        pos_idx = np.sort(pos_cycle.next(config.positives_per_batch))
        if miner is not None:
            pool_idx = np.sort(neg_cycle.next(min(miner.pool, max(len(neg), n_neg))))
            pool_idx = np.unique(pool_idx) if len(neg) < miner.pool else pool_idx
            scores = softmax(head_forward(neg[pool_idx], head))[:, 1]
            neg_idx = pool_idx[miner.select(scores, n_neg)]
        else:
            neg_idx = np.sort(neg_cycle.next(n_neg))
        x = np.concatenate([pos[pos_idx], neg[neg_idx]])
        y = np.concatenate([np.ones(len(pos_idx), dtype=np.int64), np.zeros(len(neg_idx), dtype=np.int64)])
        loss, grads = head_loss_and_grads(head, x, y)
        opt.step(grads)
        losses.append(loss)
    return head, losses


def train_loc_head(head: HeadParams, features: np.ndarray, labels: np.ndarray,
                   config: SgdConfig, rng: np.random.Generator,
                   iterations: Optional[int] = None) -> Tuple[HeadParams, List[float]]:
    """Class-balanced minibatches (loc_batch / 5 per class) of momentum SGD on the localization head."""
    config.validate()
    feats = _flat(features)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = head.output_dim
    per_class = max(1, config.loc_batch // n_classes)
    cyclers = []
    members = []
    for cls in range(n_classes):
        idx = np.flatnonzero(labels == cls)
        if len(idx) == 0:
            name = LocClass(cls).label if n_classes == len(LocClass) else str(cls)
            raise TrainingError(name)
        members.append(idx)
        cyclers.append(BatchCycler(len(idx), rng))
    opt = _MomentumSgd(head, config)
    losses: List[float] = []
    for _ in range(config.iterations if iterations is None else iterations):
        batch = np.sort(np.concatenate([members[c][cyclers[c].next(per_class)] for c in range(n_classes)]))
        loss, grads = head_loss_and_grads(head, feats[batch], labels[batch])
        opt.step(grads)
        losses.append(loss)
    return head, losses


def train_heads(model: NetworkModel, positives: np.ndarray, negatives: np.ndarray,
                config: SgdConfig, rng: np.random.Generator, *,
                loc_features: Optional[np.ndarray] = None, loc_labels: Optional[np.ndarray] = None,
                miner: Optional[HardNegativeMiner] = None,
                iterations: Optional[int] = None) -> TrainingTrace:
    """Train the object head (and the localization head when labeled features are given)."""
    trace = TrainingTrace()
    _, trace.object_loss = train_object_head(model.object_head, positives, negatives, config, rng,
                                             miner=miner, iterations=iterations)
    if loc_features is not None and loc_labels is not None and len(loc_features):
        _, trace.loc_loss = train_loc_head(model.loc_head, loc_features, loc_labels, config, rng,
                                           iterations=iterations)
    if trace.object_loss:
        LOGGER.debug("Object head loss %.4f -> %.4f over %d iterations",
                     trace.object_loss[0], trace.object_loss[-1], len(trace.object_loss))
    return trace


# ---------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------

@dataclass
class LayerFlops:
    name: str
    kind: str
    out_side: int
    count: int


@dataclass
class FlopReport:
    input_side: int
    conv_macs: int
    pool_ops: int
    lrn_ops: int
    relu_ops: int
    layers: List[LayerFlops]

    @property
    def macs(self) -> int:
        return self.conv_macs

    def to_dict(self) -> Dict[str, object]:
        return {
            "input_side": self.input_side,
            "conv_macs": self.conv_macs,
            "pool_ops": self.pool_ops,
            "lrn_ops": self.lrn_ops,
            "relu_ops": self.relu_ops,
            "layers": [vars(l) for l in self.layers],
        }


def count_flops(spec: ConvBackboneSpec, input_side: int) -> FlopReport:
    """Multiply-accumulates per conv layer (positions x kh x kw x Cin x Cout); other layers counted apart."""
    spec.validate()
    n = int(input_side)
    channels = spec.in_channels
    layers: List[LayerFlops] = []
    totals = {"conv": 0, "pool": 0, "lrn": 0, "relu": 0}
    for layer in spec.layers:
        if isinstance(layer, ConvLayer):
            n = _out_size(n + 2 * layer.padding, layer.kernel, layer.stride, layer.name)
            count = n * n * layer.kernel * layer.kernel * layer.in_channels * layer.out_channels
            channels = layer.out_channels
            kind = "conv"
        elif isinstance(layer, MaxPoolLayer):
            n = _out_size(n, layer.window, layer.stride, layer.name)
            count = n * n * channels * layer.window * layer.window
            kind = "pool"
        elif isinstance(layer, LrnLayer):
            count = n * n * channels * layer.n
            kind = "lrn"
        else:
            count = n * n * channels
            kind = "relu"
        totals[kind] += count
        layers.append(LayerFlops(layer.name, kind, n, count))
    return FlopReport(input_side=int(input_side), conv_macs=totals["conv"], pool_ops=totals["pool"],
                      lrn_ops=totals["lrn"], relu_ops=totals["relu"], layers=layers)


# ---------------------------------------------------------
# Weight files
# ---------------------------------------------------------

def save_weights(model: NetworkModel) -> bytes:
    tensors = model.tensors()
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(tensors))]
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _expected_shapes(spec: ConvBackboneSpec) -> Dict[str, Tuple[int, ...]]:
    shapes: Dict[str, Tuple[int, ...]] = {}
    for layer in spec.conv_layers:
        shapes[f"{layer.name}.weight"] = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        shapes[f"{layer.name}.bias"] = (layer.out_channels,)
    feat = 3 * 3 * spec.out_channels
    hid = spec.head_hidden
    for names, n_out in ((("fc4", "fc5", "fc6"), 2), (("fc7", "fc8", "fc9"), len(LocClass))):
        dims = [feat, hid, hid, n_out]
        for i, name in enumerate(names):
            shapes[f"{name}.weight"] = (dims[i + 1], dims[i])
            shapes[f"{name}.bias"] = (dims[i + 1],)
    return shapes


def load_weights(data: bytes, spec: ConvBackboneSpec, pad_value: float = 128.0) -> NetworkModel:
    """Parse a weight stream written by save_weights and check every tensor against `spec`."""
    buf = memoryview(bytes(data))
    if len(buf) < 16:
        raise WeightFormatError("Stream too short for header", offset=len(buf))
    if bytes(buf[:4]) != WEIGHT_MAGIC:
        raise WeightFormatError(f"Bad magic {bytes(buf[:4])!r}", offset=0)
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise WeightFormatError("CRC32 mismatch (truncated or corrupted stream)", offset=len(buf) - 4)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"Unsupported version {version}", offset=4)
    end = len(buf) - 4
    offset = 12
    tensors: Dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if offset + n > end:
            raise WeightFormatError(f"Stream ends inside {what}", offset=offset)

    for _ in range(count):
        need(2, "tensor name length")
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        need(name_len + 1, "tensor name")
        try:
            name = bytes(buf[offset:offset + name_len]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"Tensor name is not UTF-8 ({exc.reason})", offset=offset) from exc
        offset += name_len
        (rank,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        need(4 * rank, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        n_bytes = 4 * math.prod(dims)
        if n_bytes > end - offset:
            raise WeightFormatError(f"Dims {tuple(dims)} of {name} exceed the remaining stream", offset=offset)
        tensors[name] = np.frombuffer(buf[offset:offset + n_bytes], dtype="<f4").reshape(dims).astype(np.float32)
        offset += n_bytes
    if offset != end:
        raise WeightFormatError("Trailing bytes after last tensor", offset=offset)

    expected = _expected_shapes(spec)
    for name, shape in expected.items():
        if name not in tensors:
            raise WeightFormatError("Missing tensor", offset=offset, layer=name)
        if tuple(tensors[name].shape) != shape:
            raise WeightFormatError(
                f"Shape {tuple(tensors[name].shape)} does not match expected {shape}",
                offset=offset, layer=name.split(".")[0],
            )
    extra = sorted(set(tensors) - set(expected))
    if extra:
        raise WeightFormatError(f"Unexpected tensors {extra}", offset=offset, layer=extra[0])

    conv = {l.name: ConvParams(tensors[f"{l.name}.weight"], tensors[f"{l.name}.bias"]) for l in spec.conv_layers}

    def head(names: Iterable[str]) -> HeadParams:
        return HeadParams([DenseLayer(n, tensors[f"{n}.weight"], tensors[f"{n}.bias"]) for n in names])

    return NetworkModel(spec=spec, conv=conv, object_head=head(("fc4", "fc5", "fc6")),
                        loc_head=head(("fc7", "fc8", "fc9")), pad_value=pad_value)


def save_weights_file(path: Union[str, Path], model: NetworkModel) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(save_weights(model))
    LOGGER.info("Saved %d tensors to %s", len(model.tensors()), target)
    return target


def load_weights_file(path: Union[str, Path], spec: ConvBackboneSpec) -> NetworkModel:
    source = Path(path)
    model = load_weights(source.read_bytes(), spec)
    LOGGER.info("Loaded weights for backbone '%s' from %s", spec.name, source)
    return model
