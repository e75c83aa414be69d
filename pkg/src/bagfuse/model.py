"""Compound-scaled compact CNNs: construction, weak learners, overfit training.

A network is described by a flat list of :class:`LayerSpec` stages.  Compound
scaling multiplies stage repeats by ``alpha**phi``, channel widths by
``beta**phi`` (rounded up to a multiple of 4), and the expected input
resolution by ``gamma**phi``, under the constraint
``alpha * beta^2 * gamma^2 ~ 2``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, PreprocessSpec, batch_iter, preprocess
from .errors import BuildError, ContractError, DivergenceError, ShapeError
from .optim import AdaBelief, OptimizerConfig
from .tensor import (
    Tensor,
    backward,
    conv2d,
    global_avg_pool,
    linear,
    log_softmax,
    new_tape,
    nll_loss,
    no_grad,
    relu,
    silu,
)

__all__ = [
    "ScalingConfig",
    "LayerSpec",
    "WeakLearner",
    "WeakTrainRecord",
    "tiny_base_stack",
    "scale_stack",
    "expand_stack",
    "build_scaled_cnn",
    "layers_from_specs",
    "train_weak_overfit",
    "strip_head_and_freeze",
    "round_half_up",
    "round_up_to_multiple",
]

SCALING_TOLERANCE = 0.05
WIDTH_MULTIPLE = 4
OVERFIT_STREAK = 3  # consecutive epochs at 100% train accuracy before stopping


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def round_up_to_multiple(x: float, multiple: int = WIDTH_MULTIPLE) -> int:
    return int(math.ceil(x / multiple) * multiple)


@dataclass(frozen=True)
class ScalingConfig:
    """Compound-scaling coefficients; defaults are the standard grid-searched values."""

    phi: float = 0.0
    alpha: float = 1.2
    beta: float = 1.1
    gamma: float = 1.15

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 1.0:
            raise BuildError(
                f"ScalingConfig: alpha, beta, gamma must each be >= 1, got "
                f"({self.alpha}, {self.beta}, {self.gamma})"
            )
        product = self.alpha * self.beta**2 * self.gamma**2
        lo = 2.0 * (1.0 - SCALING_TOLERANCE)
        hi = 2.0 * (1.0 + SCALING_TOLERANCE)
        if not lo <= product <= hi:
            raise BuildError(
                f"ScalingConfig: alpha*beta^2*gamma^2 = {product:.4f} outside [{lo:.2f}, {hi:.2f}]"
            )

    @property
    def depth_multiplier(self) -> float:
        return self.alpha**self.phi

    @property
    def width_multiplier(self) -> float:
        return self.beta**self.phi

    @property
    def resolution_multiplier(self) -> float:
        return self.gamma**self.phi


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer (or a repeated stage of layers).

    ``act`` names an activation emitted after each conv instance when the
    stage is expanded.  ``branch`` marks side-branch layers (e.g. squeeze
    blocks) that do not alter the main activation shape; they only matter
    for complexity counting.
    """

    kind: str  # conv | linear | pool | activation | logsoftmax
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    repeat: int = 1
    groups: int = 1
    act: str = ""
    branch: bool = False
    name: str = ""


def tiny_base_stack(activation: str = "silu") -> list[LayerSpec]:
    """Desk-scale extractor: stem plus three conv stages, ending in global pooling."""
    return [
        LayerSpec("conv", 3, 16, kernel=3, stride=2, padding=1, act=activation, name="stem"),
        LayerSpec("conv", 16, 16, kernel=3, stride=1, padding=1, repeat=1, act=activation, name="stage1"),
        LayerSpec("conv", 16, 24, kernel=3, stride=2, padding=1, repeat=2, act=activation, name="stage2"),
        LayerSpec("conv", 24, 40, kernel=3, stride=2, padding=1, repeat=2, act=activation, name="stage3"),
        LayerSpec("pool", name="gap"),
    ]


def scale_stack(base: Sequence[LayerSpec], scaling: ScalingConfig) -> list[LayerSpec]:
    """Apply depth/width multipliers to a stage list; the first conv keeps its input."""
    d = scaling.depth_multiplier
    w = scaling.width_multiplier
    scaled: list[LayerSpec] = []
    prev_width: int | None = None
    for spec in base:
        if spec.kind != "conv":
            scaled.append(spec)
            continue
        out_c = round_up_to_multiple(w * spec.out_channels)
        in_c = spec.in_channels if prev_width is None else prev_width
        rep = max(1, round_half_up(d * spec.repeat))
        scaled.append(replace(spec, in_channels=in_c, out_channels=out_c, repeat=rep))
        prev_width = out_c
    return scaled


def expand_stack(specs: Sequence[LayerSpec]) -> list[LayerSpec]:
    """Resolve repeats into single layers, interleaving stage activations.

    Within a repeated conv stage only the first instance downsamples and
    changes the channel count; the rest map out->out at stride 1.
    """
    expanded: list[LayerSpec] = []
    for spec in specs:
        if spec.kind != "conv":
            for _ in range(spec.repeat):
                expanded.append(replace(spec, repeat=1))
            continue
        for i in range(spec.repeat):
            unit = replace(
                spec,
                in_channels=spec.in_channels if i == 0 else spec.out_channels,
                stride=spec.stride if i == 0 else 1,
                repeat=1,
                act="",
                name=spec.name if spec.repeat == 1 else f"{spec.name}.{i}",
            )
            expanded.append(unit)
            if spec.act:
                expanded.append(LayerSpec("activation", act=spec.act, name=f"{unit.name}.act"))
    return expanded


# ---------------------------------------------------------------------------
# runtime layers

_ACTIVATIONS = {"silu": silu, "relu": relu}


class Conv2dLayer:
    def __init__(self, spec: LayerSpec, rng: np.random.Generator, dtype=np.float32):
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        bound = 1.0 / math.sqrt(fan_in)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)),
            requires_grad=True,
            dtype=dtype,
        )
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True, dtype=dtype)
        self.stride = spec.stride
        self.padding = spec.padding

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ActivationLayer:
    def __init__(self, kind: str):
        if kind not in _ACTIVATIONS:
            raise BuildError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return _ACTIVATIONS[self.kind](x)

    def parameters(self):
        return []


class GlobalAvgPoolLayer:
    def forward(self, x: Tensor) -> Tensor:
        return global_avg_pool(x)

    def parameters(self):
        return []


class LinearLayer:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        bound = 1.0 / math.sqrt(in_features)
        self.weight = Tensor(
            rng.uniform(-bound, bound, size=(out_features, in_features)), requires_grad=True, dtype=dtype
        )
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


def layers_from_specs(specs: Sequence[LayerSpec], rng: np.random.Generator, dtype=np.float32) -> list:
    layers = []
    for spec in specs:
        if spec.kind == "conv":
            layers.append(Conv2dLayer(spec, rng, dtype))
        elif spec.kind == "activation":
            layers.append(ActivationLayer(spec.act))
        elif spec.kind == "pool":
            layers.append(GlobalAvgPoolLayer())
        else:
            raise BuildError(f"extractor stacks cannot contain kind {spec.kind!r}")
    return layers


def _simulate_extractor(specs: Sequence[LayerSpec], channels: int, size: int) -> int:
    """Walk shapes through an expanded extractor; returns the feature width."""
    c, h, w = channels, size, size
    pooled = False
    for spec in specs:
        if spec.kind == "conv":
            if spec.in_channels != c:
                raise BuildError(f"{spec.name}: expects {spec.in_channels} channels, gets {c}")
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if h < 1 or w < 1:
                raise BuildError(f"{spec.name}: resolution collapsed to {h}x{w}")
            c = spec.out_channels
        elif spec.kind == "pool":
            pooled = True
    if not pooled:
        raise BuildError("extractor stack must end in global average pooling")
    return c


class WeakLearner:
    """Feature extractor plus a detachable Linear+LogSoftmax head."""

    def __init__(
        self,
        extractor_layers: list,
        extractor_specs: list[LayerSpec],
        head: LinearLayer | None,
        scaling: ScalingConfig,
        classes: int,
        input_size: int,
        feature_dim: int,
        seed: int,
    ):
        self.extractor_layers = extractor_layers
        self.extractor_specs = extractor_specs
        self.head = head
        self.scaling = scaling
        self.classes = classes
        self.input_size = input_size
        self.feature_dim = feature_dim
        self.seed = seed
        self.frozen = False

    def _check_input(self, batch: Tensor) -> None:
        if batch.data.ndim != 4:
            raise ShapeError(f"expected [B, C, H, W] input, got {batch.shape}")
        _, c, h, w = batch.shape
        expect_c = self.extractor_specs[0].in_channels
        if c != expect_c or h != self.input_size or w != self.input_size:
            raise ShapeError(
                f"expected [B, {expect_c}, {self.input_size}, {self.input_size}] input, got {batch.shape}"
            )

    def _run_extractor(self, batch: Tensor) -> Tensor:
        out = batch
        for layer in self.extractor_layers:
            out = layer.forward(out)
        return out

    def forward_features(self, batch: Tensor) -> Tensor:
        self._check_input(batch)
        if self.frozen:
            with no_grad():
                return self._run_extractor(batch)
        return self._run_extractor(batch)

    def forward_logits(self, batch: Tensor) -> Tensor:
        if self.head is None:
            raise ContractError("forward_logits: the head has been removed")
        feats = self.forward_features(batch)
        return log_softmax(self.head.forward(feats))

    def predict(self, batch: Tensor) -> np.ndarray:
        with no_grad():
            return np.argmax(self.forward_logits(batch).data, axis=1)

    def parameters(self) -> list[tuple[str, Tensor]]:
        named: list[tuple[str, Tensor]] = []
        for i, layer in enumerate(self.extractor_layers):
            for pname, p in layer.parameters():
                named.append((f"extractor.{i}.{pname}", p))
        if self.head is not None:
            for pname, p in self.head.parameters():
                named.append((f"head.{pname}", p))
        return named

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def extractor_checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in self.parameters():
            if name.startswith("extractor."):
                digest.update(name.encode())
                digest.update(p.data.tobytes())
        return digest.hexdigest()

    def clone(self) -> "WeakLearner":
        rng = np.random.default_rng(0)
        layers = layers_from_specs(self.extractor_specs, rng)
        head = None
        if self.head is not None:
            head = LinearLayer(self.feature_dim, self.classes, rng)
        copy = WeakLearner(
            layers, list(self.extractor_specs), head, self.scaling,
            self.classes, self.input_size, self.feature_dim, self.seed,
        )
        for (_, src), (_, dst) in zip(self.parameters(), copy.parameters()):
            dst.data = src.data.copy()
            dst.requires_grad = src.requires_grad
        copy.frozen = self.frozen
        return copy


def build_scaled_cnn(
    base: Sequence[LayerSpec],
    scaling: ScalingConfig,
    classes: int,
    input_size: int = 32,
    seed: int = 0,
    dtype=np.float32,
) -> WeakLearner:
    """Materialize a weak learner from a base stack under compound scaling."""
    if classes < 2:
        raise BuildError(f"build_scaled_cnn: need >= 2 classes, got {classes}")
    specs = expand_stack(scale_stack(base, scaling))
    expected_input = max(1, round_half_up(scaling.resolution_multiplier * input_size))
    feature_dim = _simulate_extractor(specs, specs[0].in_channels, expected_input)
    rng = np.random.default_rng(seed)
    layers = layers_from_specs(specs, rng, dtype)
    head = LinearLayer(feature_dim, classes, rng, dtype)
    return WeakLearner(layers, specs, head, scaling, classes, expected_input, feature_dim, seed)


def strip_head_and_freeze(model: WeakLearner) -> WeakLearner:
    """Detach the classification head and freeze every extractor parameter."""
    model.head = None
    model.frozen = True
    for _, p in model.parameters():
        p.requires_grad = False
        p.grad = None
    return model


# ---------------------------------------------------------------------------
# phase-1 training


@dataclass
class WeakTrainRecord:
    epochs: list[dict] = field(default_factory=list)
    reached_overfit: bool = False

    @property
    def final_train_accuracy(self) -> float:
        return self.epochs[-1]["train_accuracy"] if self.epochs else 0.0

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["loss"] if self.epochs else math.inf


def _dataset_accuracy(model: WeakLearner, x_all: np.ndarray, y_all: np.ndarray, batch_size: int) -> float:
    hits = 0
    with no_grad():
        for idx in batch_iter(len(y_all), batch_size):
            preds = np.argmax(model.forward_logits(Tensor(x_all[idx])).data, axis=1)
            hits += int((preds == y_all[idx]).sum())
    return hits / len(y_all)


def train_weak_overfit(
    model: WeakLearner,
    subset: Dataset,
    opt_config: OptimizerConfig,
    max_epochs: int,
    batch_size: int = 25,
    pre_spec: PreprocessSpec | None = None,
    resize_kernel: str = "bilinear",
    seed: int = 0,
) -> WeakTrainRecord:
    """Train until 100% train accuracy holds for a few consecutive epochs.

    No validation is consulted here: the point of phase 1 is deliberate
    specialization on the assigned subset.
    """
    record = WeakTrainRecord()
    if max_epochs <= 0:
        return record
    if pre_spec is None:
        pre_spec = PreprocessSpec((model.input_size, model.input_size), (0.5,) * 3, (0.25,) * 3)
    x_all = preprocess(subset.images, pre_spec, kernel=resize_kernel).data
    y_all = subset.labels
    opt = AdaBelief.from_config(model.parameters(), opt_config)

    streak = 0
    for epoch in range(max_epochs):
        losses = []
        for idx in batch_iter(len(y_all), batch_size, shuffle=True, seed=seed * 100003 + epoch):
            with new_tape():
                logits = model.forward_logits(Tensor(x_all[idx]))
                loss = nll_loss(logits, y_all[idx])
                backward(loss)
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
        acc = _dataset_accuracy(model, x_all, y_all, batch_size)
        record.epochs.append({"epoch": epoch, "loss": mean_loss, "train_accuracy": acc})
        streak = streak + 1 if acc == 1.0 else 0
        if streak >= OVERFIT_STREAK:
            record.reached_overfit = True
            break
    return record
