"""The recognition network: a two-stream Inception backbone shared by all
classes, per-class attention branches with one-vs-rest detectors, feature
fusion, and the classifier head, plus the joint loss and checkpoint I/O.

Layer sizes are fixed by the 28x28 flow input: each stream flattens to
7*7*4*filters2 features after two inception+pool stages, both streams
concatenate, and a dense projection produces the shared feature vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError, UsageError
from .ioutil import atomic_write_bytes

CHECKPOINT_MAGIC = b"FRCKPT1\x00"

VARIANT_BASIC = "basic"        # backbone + classifier only
VARIANT_FULL = "fr"            # attention branches, sum fusion
VARIANT_FC = "fr_fc"           # branches without softmax attention
VARIANT_CONCAT = "fr_concat"   # attention branches, concat fusion
VARIANTS = (VARIANT_BASIC, VARIANT_FULL, VARIANT_FC, VARIANT_CONCAT)

INPUT_SIZE = 28


@dataclass
class ModelConfig:
    n_classes: int = 3
    variant: str = VARIANT_FULL
    shared_dim: int = 1024
    detector_hidden: int = 196
    classifier_hidden: int = 32
    dropout_p: float = 0.5
    proposal_weight: float = 0.85   # weight of the detection loss in the joint loss
    filters_layer1: int = 6         # per-branch filters, first inception layer
    filters_layer2: int = 16        # per-branch filters, second inception layer
    # fixed gain applied to both input streams. The softmax attention rows
    # sum to 1 over shared_dim features, so unit-variance inputs leave the
    # fused feature ~shared_dim times too small for the heads to train at
    # practical rates; this gain restores the image-like input scale such
    # flow pipelines are calibrated for.
    input_gain: float = 30.0

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.proposal_weight < 0:
            raise ConfigError("proposal_weight must be >= 0")
        if min(self.shared_dim, self.detector_hidden, self.classifier_hidden,
               self.filters_layer1, self.filters_layer2) < 1:
            raise ConfigError("all layer dimensions must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.input_gain <= 0:
            raise ConfigError(f"input_gain must be positive, got {self.input_gain}")

    @property
    def stream_flat_dim(self) -> int:
        pooled = INPUT_SIZE // 4  # two 2x2 max pools
        return pooled * pooled * 4 * self.filters_layer2

    @property
    def classifier_input_dim(self) -> int:
        if self.variant == VARIANT_CONCAT:
            return self.n_classes * self.shared_dim
        return self.shared_dim


class ModelParams:
    """Named, ordered collection of the learnable tensors plus the config
    that shaped them."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())


@dataclass
class ForwardOutput:
    """Everything the forward pass produces for one batch."""

    shared: Tensor                 # [N, shared_dim]
    attention: list | None         # per class, [N, shared_dim] rows summing to 1
    specific: list | None          # per class, [N, shared_dim]
    detector_probs: Tensor | None  # [N, K] in (0, 1)
    refined: Tensor | None         # fused feature, None for the basic variant
    logits: Tensor                 # [N, K]


# ---------------------------------------------------------------------------
# construction


def _glorot(rng, fan_in: int, fan_out: int, shape, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _param_plan(config: ModelConfig):
    """Ordered (name, shape, fan_in, fan_out) for every tensor of the model."""
    plan = []

    def conv(name, f, c, k):
        plan.append((f"{name}.w", (f, c, k, k), c * k * k, f * k * k))
        plan.append((f"{name}.b", (f,), 0, 0))

    def fc(name, d_in, d_out):
        plan.append((f"{name}.w", (d_in, d_out), d_in, d_out))
        plan.append((f"{name}.b", (d_out,), 0, 0))

    for s in range(2):
        c_in = 1
        for layer, f in ((1, config.filters_layer1), (2, config.filters_layer2)):
            p = f"stream{s}.inc{layer}"
            conv(f"{p}.b1", f, c_in, 1)
            conv(f"{p}.b2_reduce", f, c_in, 1)
            conv(f"{p}.b2_conv", f, f, 3)
            conv(f"{p}.b3_reduce", f, c_in, 1)
            conv(f"{p}.b3_conv", f, f, 5)
            conv(f"{p}.b4_proj", f, c_in, 1)
            c_in = 4 * f
    fc("shared_proj", 2 * config.stream_flat_dim, config.shared_dim)
    if config.variant != VARIANT_BASIC:
        for k in range(config.n_classes):
            fc(f"branch{k}.map", config.shared_dim, config.shared_dim)
            fc(f"branch{k}.det1", config.shared_dim, config.detector_hidden)
            fc(f"branch{k}.det2", config.detector_hidden, 1)
    fc("cls_fc1", config.classifier_input_dim, config.classifier_hidden)
    fc("cls_fc2", config.classifier_hidden, config.n_classes)
    return plan


def build_model(config: ModelConfig, seed, dtype=np.float32) -> ModelParams:
    """Initialize all learnable tensors: scaled-uniform weights with bound
    sqrt(6 / (fan_in + fan_out)), zero biases. Deterministic in the seed."""
    config.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in, fan_out in _param_plan(config):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = _glorot(rng, fan_in, fan_out, shape, dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(config, tensors)


def count_parameters(config: ModelConfig) -> int:
    """Closed-form learnable parameter count for a configuration."""
    config.validate()
    return sum(int(np.prod(shape)) for _, shape, _, _ in _param_plan(config))


# ---------------------------------------------------------------------------
# forward pass


def _inception_block(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    """Four parallel branches (1x1; 1x1->3x3; 1x1->5x5; 3x3 pool->1x1),
    relu after every convolution, channel-wise concatenation."""
    p = params.tensors
    b1 = ad.relu(ad.conv2d(x, p[f"{prefix}.b1.w"], p[f"{prefix}.b1.b"], "same"))
    r2 = ad.relu(ad.conv2d(x, p[f"{prefix}.b2_reduce.w"], p[f"{prefix}.b2_reduce.b"], "same"))
    b2 = ad.relu(ad.conv2d(r2, p[f"{prefix}.b2_conv.w"], p[f"{prefix}.b2_conv.b"], "same"))
    r3 = ad.relu(ad.conv2d(x, p[f"{prefix}.b3_reduce.w"], p[f"{prefix}.b3_reduce.b"], "same"))
    b3 = ad.relu(ad.conv2d(r3, p[f"{prefix}.b3_conv.w"], p[f"{prefix}.b3_conv.b"], "same"))
    pooled = ad.maxpool2d(x, window=3, stride=1, padding="same")
    b4 = ad.relu(ad.conv2d(pooled, p[f"{prefix}.b4_proj.w"], p[f"{prefix}.b4_proj.b"], "same"))
    return ad.concat([b1, b2, b3, b4], axis=1)


def _stream(params: ModelParams, s: int, x: Tensor) -> Tensor:
    h = _inception_block(params, f"stream{s}.inc1", x)
    h = ad.maxpool2d(h, window=2, stride=2)
    h = _inception_block(params, f"stream{s}.inc2", h)
    h = ad.maxpool2d(h, window=2, stride=2)
    return ad.flatten(h)


def forward_shared(params: ModelParams, u_stream, v_stream, training: bool = False) -> Tensor:
    """Expression-shared feature: both flow streams through their inception
    stacks, concatenated, projected and rectified. Output [N, shared_dim]."""
    for name, t in (("u_stream", u_stream), ("v_stream", v_stream)):
        shape = tuple(t.shape)
        if len(shape) != 4 or shape[1] != 1 or shape[2] != INPUT_SIZE or shape[3] != INPUT_SIZE:
            raise ShapeError(
                f"{name} must be [N,1,{INPUT_SIZE},{INPUT_SIZE}], got {shape}")
    gain = params.config.input_gain
    if gain != 1.0:
        u_stream = ad.scale(u_stream, gain)
        v_stream = ad.scale(v_stream, gain)
    fu = _stream(params, 0, u_stream)
    fv = _stream(params, 1, v_stream)
    both = ad.concat([fu, fv], axis=1)
    p = params.tensors
    return ad.relu(ad.dense(both, p["shared_proj.w"], p["shared_proj.b"]))


def propose(params: ModelParams, shared: Tensor, training: bool = False):
    """Per-class feature distillation and one-vs-rest detection.

    For each class k the shared feature goes through that branch's dense
    map; the full variant turns the result into softmax attention weights
    multiplied back onto the shared feature, while the fc variant uses the
    rectified map output directly. A two-layer detector with sigmoid output
    scores each distilled feature.

    Returns (attention or None, specific features, per-class prob columns).
    """
    cfg = params.config
    if cfg.variant == VARIANT_BASIC:
        raise UsageError("the basic variant has no proposal branches")
    p = params.tensors
    attention = [] if cfg.variant != VARIANT_FC else None
    specific = []
    prob_cols = []
    for k in range(cfg.n_classes):
        mapped = ad.dense(shared, p[f"branch{k}.map.w"], p[f"branch{k}.map.b"])
        if cfg.variant == VARIANT_FC:
            z_k = ad.relu(mapped)
        else:
            a_k = ad.softmax(mapped, axis=1)
            attention.append(a_k)
            z_k = ad.mul(a_k, shared)
        specific.append(z_k)
        h = ad.relu(ad.dense(z_k, p[f"branch{k}.det1.w"], p[f"branch{k}.det1.b"]))
        prob_cols.append(ad.sigmoid(ad.dense(h, p[f"branch{k}.det2.w"], p[f"branch{k}.det2.b"])))
    return attention, specific, prob_cols


def fuse(specific, variant: str = VARIANT_FULL) -> Tensor:
    """Aggregate the per-class features: element-wise sum, or channel
    concatenation for the concat variant."""
    if not specific:
        raise ShapeError("fuse needs at least one feature tensor")
    if variant == VARIANT_CONCAT:
        return ad.concat(specific, axis=1)
    return ad.add(*specific)


def classify(params: ModelParams, refined: Tensor, training: bool = False, rng=None) -> Tensor:
    """Two dense layers with relu and dropout in between; raw logits out."""
    cfg = params.config
    if refined.shape[1] != cfg.classifier_input_dim:
        raise ShapeError(
            f"classifier expects input dim {cfg.classifier_input_dim}, got {refined.shape[1]}")
    p = params.tensors
    h = ad.relu(ad.dense(refined, p["cls_fc1.w"], p["cls_fc1.b"]))
    h = ad.dropout(h, cfg.dropout_p, training=training, rng=rng)
    return ad.dense(h, p["cls_fc2.w"], p["cls_fc2.b"])


def forward_full(params: ModelParams, u_stream, v_stream,
                 training: bool = False, rng=None) -> ForwardOutput:
    """Complete forward pass for any variant."""
    cfg = params.config
    shared = forward_shared(params, u_stream, v_stream, training)
    if cfg.variant == VARIANT_BASIC:
        logits = classify(params, shared, training, rng)
        return ForwardOutput(shared=shared, attention=None, specific=None,
                             detector_probs=None, refined=None, logits=logits)
    attention, specific, prob_cols = propose(params, shared, training)
    detector_probs = ad.concat(prob_cols, axis=1)
    refined = fuse(specific, cfg.variant)
    logits = classify(params, refined, training, rng)
    return ForwardOutput(shared=shared, attention=attention, specific=specific,
                         detector_probs=detector_probs, refined=refined, logits=logits)


# ---------------------------------------------------------------------------
# losses


def proposal_loss(detector_probs: Tensor, class_labels, n_classes: int,
                  reduction: str = "mean") -> Tensor:
    """Average of the K one-vs-rest detection losses.

    Detector k is scored with binary cross-entropy against the indicator
    of class k; the proposal loss is exactly the mean of those K scalars.
    """
    y = np.asarray(class_labels)
    if y.ndim != 1 or y.shape[0] != detector_probs.shape[0]:
        raise ShapeError(
            f"labels shape {y.shape} does not match probs {tuple(detector_probs.shape)}")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DataError(f"class label out of range [0, {n_classes})")
    if detector_probs.shape[1] != n_classes:
        raise ShapeError(
            f"detector_probs has {detector_probs.shape[1]} columns, expected {n_classes}")
    cols = ad.split(detector_probs, [1] * n_classes, axis=1)
    losses = []
    for k, col in enumerate(cols):
        target = (y == k).astype(np.float64).reshape(-1, 1)
        losses.append(ad.binary_cross_entropy(col, target, reduction=reduction))
    return ad.scale(ad.add(*losses), 1.0 / n_classes)


def classification_loss(logits: Tensor, class_labels, reduction: str = "mean") -> Tensor:
    return ad.softmax_cross_entropy(logits, class_labels, reduction=reduction)


def total_loss(l_proposal, l_classification, proposal_weight: float):
    """Joint objective: proposal_weight * detection + classification.

    A zero weight (or the basic variant, which passes l_proposal=None)
    reduces to the classification loss exactly.
    """
    if proposal_weight < 0:
        raise ConfigError("proposal_weight must be >= 0")
    if l_proposal is None or proposal_weight == 0.0:
        return l_classification
    return ad.add(ad.scale(l_proposal, proposal_weight), l_classification)


def predict(logits: Tensor) -> np.ndarray:
    """Class predictions: argmax over logits (softmax is monotone)."""
    return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams) -> None:
    """Binary checkpoint: magic, length-prefixed canonical config JSON, then
    each tensor as (u32 name length, name, u32 rank, dims u32 LE, f32 data)."""
    cfg_blob = json.dumps(asdict(params.config), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(cfg_blob)), cfg_blob]
    for name, t in params.items():
        nb = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        piece = blob[off:off + n]
        off += n
        return piece

    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig(**json.loads(take(cfg_len).decode("utf-8")))
    config.validate()
    tensors = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).copy()
        tensors[name] = Tensor(data, requires_grad=True)
    params = ModelParams(config, tensors)
    expected = {name for name, _, _, _ in _param_plan(config)}
    if set(tensors) != expected:
        raise DataError(f"{path}: checkpoint tensors do not match the config's layout")
    return params
