"""Static parameter/FLOPs accounting and the training-pipeline cost model.

Counting conventions (chosen to reproduce published per-image numbers for the
reference architecture):

* one multiply-accumulate counts as one FLOP,
* conv: params = Cout*(Cin/groups)*k^2 + Cout, flops = params_mul * H' * W',
* linear: params = O*F + O, flops = O*F,
* activations / pooling / log-softmax: zero params, flops = element count,
* backward cost equals forward cost,
* an optimizer update costs 20 FLOPs per trainable parameter.

Counts are per single input (batch size excluded).  A ``x2`` reporting flag
is available for consumers that count multiplies and adds separately.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import ContractError, ShapeError
from .model import LayerSpec, WeakLearner, expand_stack

__all__ = [
    "ComplexityReport",
    "CostModel",
    "CostSummary",
    "count_layer",
    "model_complexity",
    "efficientnet_b0_descriptor",
    "weak_learner_complexity",
    "adaptive_ensemble_complexity",
    "output_combination_complexity",
    "voting_complexity",
    "pipeline_cost",
]

UPDATE_FLOPS_PER_PARAM = 20


@dataclass(frozen=True)
class ComplexityReport:
    params_total: int
    params_trainable: int
    flops_fwd: int
    flops_back: int
    flops_update: int

    def __post_init__(self):
        if self.params_trainable > self.params_total:
            raise ContractError("ComplexityReport: trainable params exceed total")
        if min(self.params_total, self.params_trainable, self.flops_fwd, self.flops_back, self.flops_update) < 0:
            raise ContractError("ComplexityReport: negative count")

    def scaled_flops(self, mac_factor: int = 1) -> dict:
        """Optionally report with a x2 multiply+add convention."""
        return {
            "flops_fwd": self.flops_fwd * mac_factor,
            "flops_back": self.flops_back * mac_factor,
            "flops_update": self.flops_update,
        }


def _propagate(spec: LayerSpec, shape: tuple) -> tuple[int, int, tuple]:
    """Count one layer at ``shape`` ((C, H, W) or (F,)); returns new shape too."""
    if spec.kind == "conv":
        if len(shape) != 3:
            raise ShapeError(f"{spec.name or 'conv'}: needs a (C, H, W) input, got {shape}")
        c, h, w = shape
        if spec.in_channels != c:
            raise ShapeError(f"{spec.name or 'conv'}: expects {spec.in_channels} channels, gets {c}")
        if spec.in_channels % spec.groups or spec.out_channels % spec.groups:
            raise ShapeError(f"{spec.name or 'conv'}: groups={spec.groups} must divide channel counts")
        oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{spec.name or 'conv'}: non-positive output {oh}x{ow}")
        per_out = (spec.in_channels // spec.groups) * spec.kernel * spec.kernel
        params = spec.out_channels * per_out + spec.out_channels
        flops = spec.out_channels * per_out * oh * ow
        return params, flops, (spec.out_channels, oh, ow)
    if spec.kind == "linear":
        params = spec.out_channels * spec.in_channels + spec.out_channels
        flops = spec.out_channels * spec.in_channels
        if spec.branch:
            return params, flops, shape  # side branch, main shape unchanged
        if len(shape) != 1 or shape[0] != spec.in_channels:
            raise ShapeError(f"{spec.name or 'linear'}: expects ({spec.in_channels},) input, gets {shape}")
        return params, flops, (spec.out_channels,)
    if spec.kind == "pool":
        if len(shape) != 3:
            raise ShapeError(f"{spec.name or 'pool'}: needs a (C, H, W) input, got {shape}")
        c, h, w = shape
        return 0, c * h * w, (c,)
    if spec.kind in ("activation", "logsoftmax"):
        count = 1
        for d in shape:
            count *= d
        return 0, count, shape
    raise ShapeError(f"unknown layer kind {spec.kind!r}")


def count_layer(spec: LayerSpec, input_shape: tuple) -> tuple[int, int]:
    """(params, forward FLOPs) for a single layer applied at ``input_shape``."""
    params, flops, _ = _propagate(spec, tuple(input_shape))
    return params, flops


def model_complexity(
    specs: Sequence[LayerSpec],
    input_shape: tuple,
    frozen_mask: Sequence[bool] | None = None,
) -> ComplexityReport:
    """Sum layer counts over a stack, propagating shapes.

    ``frozen_mask`` marks layers (after repeat expansion) whose parameters do
    not train; omitted means everything trains.
    """
    expanded = expand_stack(specs)
    if frozen_mask is not None and len(frozen_mask) != len(expanded):
        raise ContractError(
            f"frozen_mask has {len(frozen_mask)} entries for {len(expanded)} expanded layers"
        )
    shape = tuple(input_shape)
    params_total = 0
    params_trainable = 0
    flops = 0
    for i, spec in enumerate(expanded):
        p, f, shape = _propagate(spec, shape)
        params_total += p
        flops += f
        if frozen_mask is None or not frozen_mask[i]:
            params_trainable += p
    return ComplexityReport(
        params_total=params_total,
        params_trainable=params_trainable,
        flops_fwd=flops,
        flops_back=flops,
        flops_update=UPDATE_FLOPS_PER_PARAM * params_trainable,
    )


# ---------------------------------------------------------------------------
# reference architecture descriptor

# (expand_ratio, out_channels, repeats, first stride, kernel) per inverted-residual stage
_B0_STAGES = [
    (1, 16, 1, 1, 3),
    (6, 24, 2, 2, 3),
    (6, 40, 2, 2, 5),
    (6, 80, 3, 2, 3),
    (6, 112, 3, 1, 5),
    (6, 192, 4, 2, 5),
    (6, 320, 1, 1, 3),
]
B0_FEATURE_DIM = 1280
B0_INPUT_SIZE = 224


def _inverted_residual(cin: int, cout: int, expand: int, stride: int, kernel: int, name: str) -> list[LayerSpec]:
    mid = cin * expand
    squeeze = max(1, cin // 4)
    specs: list[LayerSpec] = []
    if expand != 1:
        specs.append(LayerSpec("conv", cin, mid, kernel=1, name=f"{name}.expand"))
        specs.append(LayerSpec("activation", name=f"{name}.expand.act", act="silu"))
    specs.append(
        LayerSpec("conv", mid, mid, kernel=kernel, stride=stride, padding=kernel // 2, groups=mid, name=f"{name}.dw")
    )
    specs.append(LayerSpec("activation", name=f"{name}.dw.act", act="silu"))
    # squeeze-excitation counted as two side-branch linears plus the rescale
    specs.append(LayerSpec("linear", mid, squeeze, branch=True, name=f"{name}.se.reduce"))
    specs.append(LayerSpec("linear", squeeze, mid, branch=True, name=f"{name}.se.expand"))
    specs.append(LayerSpec("activation", name=f"{name}.se.scale", act="silu"))
    specs.append(LayerSpec("conv", mid, cout, kernel=1, name=f"{name}.project"))
    return specs


def efficientnet_b0_descriptor() -> list[LayerSpec]:
    """Stage-level description of the reference b0 backbone, for counting only.

    Depthwise and squeeze-excitation structure is kept with exact
    parameter/MAC formulas; normalization layers are omitted (no effect on
    the count windows of interest).  Never instantiated as a trainable net.
    """
    specs = [
        LayerSpec("conv", 3, 32, kernel=3, stride=2, padding=1, name="stem"),
        LayerSpec("activation", name="stem.act", act="silu"),
    ]
    cin = 32
    for stage_idx, (expand, cout, repeats, stride, kernel) in enumerate(_B0_STAGES, start=1):
        for rep in range(repeats):
            specs.extend(
                _inverted_residual(
                    cin, cout, expand, stride if rep == 0 else 1, kernel, name=f"stage{stage_idx}.{rep}"
                )
            )
            cin = cout
    specs += [
        LayerSpec("conv", cin, B0_FEATURE_DIM, kernel=1, name="head.conv"),
        LayerSpec("activation", name="head.act", act="silu"),
        LayerSpec("pool", name="head.gap"),
        LayerSpec("linear", B0_FEATURE_DIM, 1000, name="head.fc"),
        LayerSpec("logsoftmax", name="head.logsoftmax"),
    ]
    return specs


# ---------------------------------------------------------------------------
# ensemble-level accounting


def weak_learner_complexity(learner: WeakLearner) -> ComplexityReport:
    specs = list(learner.extractor_specs)
    if learner.head is not None:
        specs.append(LayerSpec("linear", learner.feature_dim, learner.classes, name="head"))
        specs.append(LayerSpec("logsoftmax", name="head.logsoftmax"))
    in_c = learner.extractor_specs[0].in_channels
    mask = [learner.frozen] * len(learner.extractor_specs) + [False] * (len(specs) - len(learner.extractor_specs))
    return model_complexity(specs, (in_c, learner.input_size, learner.input_size), frozen_mask=mask)


def _combiner_report(in_features: int, classes: int) -> tuple[int, int]:
    params = classes * in_features + classes
    flops = classes * in_features + classes  # linear MACs plus the log-softmax pass
    return params, flops


def adaptive_ensemble_complexity(extractors: Sequence[WeakLearner], classes: int) -> ComplexityReport:
    reports = [weak_learner_complexity(ex) for ex in extractors]
    comb_params, comb_flops = _combiner_report(sum(ex.feature_dim for ex in extractors), classes)
    return ComplexityReport(
        params_total=sum(r.params_total for r in reports) + comb_params,
        params_trainable=comb_params,
        flops_fwd=sum(r.flops_fwd for r in reports) + comb_flops,
        flops_back=sum(r.flops_fwd for r in reports) + comb_flops,
        flops_update=UPDATE_FLOPS_PER_PARAM * comb_params,
    )


def output_combination_complexity(weak_reports: Sequence[ComplexityReport], n: int, classes: int) -> ComplexityReport:
    comb_params, comb_flops = _combiner_report(n * classes, classes)
    return ComplexityReport(
        params_total=sum(r.params_total for r in weak_reports) + comb_params,
        params_trainable=comb_params,
        flops_fwd=sum(r.flops_fwd for r in weak_reports) + comb_flops,
        flops_back=sum(r.flops_fwd for r in weak_reports) + comb_flops,
        flops_update=UPDATE_FLOPS_PER_PARAM * comb_params,
    )


def voting_complexity(weak_reports: Sequence[ComplexityReport]) -> ComplexityReport:
    total = sum(r.params_total for r in weak_reports)
    flops = sum(r.flops_fwd for r in weak_reports)
    return ComplexityReport(
        params_total=total,
        params_trainable=0,
        flops_fwd=flops,
        flops_back=flops,
        flops_update=0,
    )


# ---------------------------------------------------------------------------
# pipeline cost model


@dataclass(frozen=True)
class CostModel:
    """Per-image FLOPs inputs for the two-phase training pipeline.

    ``a_end_to_end`` weak trainings and ``b_fine_tune`` combination-layer
    fine-tunings; ``f_upd`` defaults to 20 FLOPs per end-to-end trainable
    parameter.  ``head_params`` sizes the small combination layer whose
    backward/update terms dominate a fine-tuning step's non-forward cost.
    """

    f_fwd: float
    f_back: float
    p_params: float
    f_upd: float | None = None
    a_end_to_end: int = 2
    b_fine_tune: int = 5
    n_learners: int = 2
    head_params: float = 100_000.0

    def __post_init__(self):
        if self.a_end_to_end < 1 or self.b_fine_tune < 1 or self.n_learners < 1:
            raise ContractError("CostModel: A, B, and N must each be >= 1")
        if min(self.f_fwd, self.f_back, self.p_params, self.head_params) <= 0:
            raise ContractError("CostModel: FLOPs and parameter counts must be positive")

    @property
    def update_flops(self) -> float:
        return self.f_upd if self.f_upd is not None else UPDATE_FLOPS_PER_PARAM * self.p_params


@dataclass(frozen=True)
class CostSummary:
    mode: str
    terms: dict
    total: float


def pipeline_cost(model: CostModel, parallel: bool) -> CostSummary:
    """Per-image pipeline FLOPs.

    Parallel mode assumes the weak trainings run concurrently and the N
    frozen forward passes of a fine-tuning step overlap, collapsing the
    pipeline to one weak forward+backward+update plus one extra forward.
    Serial mode adds every run: each fine-tuning step costs N forwards plus
    the small combination-layer backward (~2 FLOPs/param) and update.
    """
    f_upd = model.update_flops
    if parallel:
        terms = {
            "forward": 2.0 * model.f_fwd,
            "backward": model.f_back,
            "update": f_upd,
        }
    else:
        head_back = 2.0 * model.head_params
        head_upd = UPDATE_FLOPS_PER_PARAM * model.head_params
        terms = {
            "end_to_end": model.a_end_to_end * (model.f_fwd + model.f_back + f_upd),
            "fine_tune": model.b_fine_tune * (model.n_learners * model.f_fwd + head_back + head_upd),
        }
    return CostSummary(mode="parallel" if parallel else "serial", terms=terms, total=float(sum(terms.values())))
