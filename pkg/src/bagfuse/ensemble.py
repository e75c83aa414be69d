"""Ensemble strategies over trained weak learners.

Three ways to combine N weak learners:

* majority voting over predicted labels (static),
* a trainable combination layer over the concatenated head outputs,
* the adaptive ensemble: a trainable Linear+LogSoftmax combination layer over
  the concatenated *features* of frozen, headless extractors.

Only the combination layer trains in the latter two; extractors stay
bit-frozen throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset, PreprocessSpec, batch_iter, preprocess
from .errors import ContractError, DivergenceError
from .metrics import accuracy, weighted_f1
from .model import WeakLearner
from .optim import AdaBelief, EarlyStopper, OptimizerConfig
from .tensor import Tensor, backward, concat, linear, log_softmax, new_tape, nll_loss, no_grad

__all__ = [
    "AdaptiveEnsemble",
    "OutputCombinationEnsemble",
    "FineTuneRecord",
    "ComparisonRow",
    "ComparisonResult",
    "feature_concat",
    "majority_vote",
    "output_combination_forward",
    "fine_tune_ensemble",
    "run_comparison",
]


def feature_concat(features: Sequence[Tensor]) -> Tensor:
    """Concatenate [B, f_i] feature blocks along the feature axis, in order."""
    return concat(list(features), axis=1)


def majority_vote(predictions: Sequence[np.ndarray]) -> np.ndarray:
    """Per-sample modal label; ties break toward the lowest class index."""
    if len(predictions) == 0:
        raise ContractError("majority_vote: no voters")
    arrs = [np.asarray(p, dtype=np.int64) for p in predictions]
    n = len(arrs[0])
    for a in arrs:
        if a.shape != (n,):
            raise ContractError("majority_vote: voters disagree on sample count")
    k = int(max(a.max() for a in arrs)) + 1
    counts = np.zeros((n, k), dtype=np.int64)
    rows = np.arange(n)
    for a in arrs:
        counts[rows, a] += 1
    return np.argmax(counts, axis=1)  # argmax picks the lowest index on ties


class _CombinerMixin:
    """Shared trainable Linear+LogSoftmax combination layer."""

    combination_weight: Tensor
    combination_bias: Tensor

    def _init_combiner(self, in_features: int, classes: int, seed: int) -> None:
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(in_features)
        self.combination_weight = Tensor(
            rng.uniform(-bound, bound, size=(classes, in_features)),
            requires_grad=True,
            dtype=np.float32,
        )
        self.combination_bias = Tensor(np.zeros(classes), requires_grad=True, dtype=np.float32)

    def combine(self, z: Tensor) -> Tensor:
        return log_softmax(linear(z, self.combination_weight, self.combination_bias))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("combination.weight", self.combination_weight),
            ("combination.bias", self.combination_bias),
        ]

    def parameter_snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters()}

    def load_parameter_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            p.data = snap[name].copy()

    @property
    def trainable_parameter_count(self) -> int:
        return self.combination_weight.size + self.combination_bias.size


class AdaptiveEnsemble(_CombinerMixin):
    """N frozen extractors feeding one trainable combination layer."""

    def __init__(self, extractors: Sequence[WeakLearner], classes: int, seed: int = 0):
        if not extractors:
            raise ContractError("AdaptiveEnsemble: need at least one extractor")
        for ex in extractors:
            if not ex.frozen or ex.head is not None:
                raise ContractError("AdaptiveEnsemble: extractors must be frozen and headless")
        self.extractors = list(extractors)
        self.classes = classes
        self.seed = seed
        self.feature_dims = [ex.feature_dim for ex in self.extractors]
        self._init_combiner(sum(self.feature_dims), classes, seed)

    @property
    def n(self) -> int:
        return len(self.extractors)

    def extract(self, batch: Tensor) -> Tensor:
        return feature_concat([ex.forward_features(batch) for ex in self.extractors])

    def forward(self, batch: Tensor) -> Tensor:
        """Log-probabilities; extractor passes record no gradients."""
        return self.combine(self.extract(batch))

    def predict(self, batch: Tensor) -> np.ndarray:
        with no_grad():
            return np.argmax(self.forward(batch).data, axis=1)

    def extract_features_array(self, x_all: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Precompute concatenated features for a whole preprocessed array."""
        chunks = []
        with no_grad():
            for idx in batch_iter(len(x_all), batch_size):
                chunks.append(self.extract(Tensor(x_all[idx])).data.copy())
        return np.concatenate(chunks, axis=0)


class OutputCombinationEnsemble(_CombinerMixin):
    """Combination layer fed with the weak learners' log-probability outputs."""

    def __init__(self, learners: Sequence[WeakLearner], classes: int, seed: int = 0):
        if not learners:
            raise ContractError("OutputCombinationEnsemble: need at least one learner")
        for lrn in learners:
            if lrn.head is None:
                raise ContractError("OutputCombinationEnsemble: learners must keep their heads")
        self.extractors = list(learners)
        self.classes = classes
        self.seed = seed
        self._init_combiner(len(learners) * classes, classes, seed)

    @property
    def n(self) -> int:
        return len(self.extractors)

    def extract(self, batch: Tensor) -> Tensor:
        with no_grad():  # weak learners are fixed; only the combiner trains
            outs = [lrn.forward_logits(batch) for lrn in self.extractors]
            return feature_concat(outs)

    def forward(self, batch: Tensor) -> Tensor:
        return self.combine(self.extract(batch))

    def predict(self, batch: Tensor) -> np.ndarray:
        with no_grad():
            return np.argmax(self.forward(batch).data, axis=1)

    extract_features_array = AdaptiveEnsemble.extract_features_array


def output_combination_forward(ensemble: OutputCombinationEnsemble, batch: Tensor) -> Tensor:
    return ensemble.forward(batch)


# ---------------------------------------------------------------------------
# phase-2 fine-tuning


@dataclass
class FineTuneRecord:
    seed: int
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_f1: float = -math.inf
    stopped_early: bool = False

    @property
    def valid_f1_curve(self) -> list[float]:
        return [e["valid_f1"] for e in self.epochs]


def fine_tune_ensemble(
    ensemble,
    train: Dataset,
    valid: Dataset,
    opt_config: OptimizerConfig,
    stopper: EarlyStopper,
    batch_size: int = 50,
    max_epochs: int = 100,
    pre_spec: PreprocessSpec | None = None,
    resize_kernel: str = "bilinear",
    seed: int = 0,
    precompute_features: bool = True,
) -> FineTuneRecord:
    """Train only the combination layer; early-stop on validation weighted F1.

    Frozen extractor outputs are deterministic, so by default they are
    computed once per dataset and the epochs iterate over cached features.
    ``precompute_features=False`` forwards through the extractors each step
    instead (same numbers, slower).
    """
    size = ensemble.extractors[0].input_size
    if pre_spec is None:
        pre_spec = PreprocessSpec((size, size), (0.5,) * 3, (0.25,) * 3)
    x_train = preprocess(train.images, pre_spec, kernel=resize_kernel).data
    x_valid = preprocess(valid.images, pre_spec, kernel=resize_kernel).data
    y_train, y_valid = train.labels, valid.labels

    if precompute_features:
        f_train = ensemble.extract_features_array(x_train)
        f_valid = ensemble.extract_features_array(x_valid)

        def train_logits(idx):
            return ensemble.combine(Tensor(f_train[idx]))

        def valid_predictions():
            with no_grad():
                return np.argmax(ensemble.combine(Tensor(f_valid)).data, axis=1)

    else:

        def train_logits(idx):
            return ensemble.forward(Tensor(x_train[idx]))

        def valid_predictions():
            preds = []
            with no_grad():
                for idx in batch_iter(len(y_valid), batch_size):
                    preds.append(np.argmax(ensemble.forward(Tensor(x_valid[idx])).data, axis=1))
            return np.concatenate(preds)

    opt = AdaBelief.from_config(ensemble.parameters(), opt_config)
    record = FineTuneRecord(seed=seed)
    for epoch in range(max_epochs):
        losses = []
        for idx in batch_iter(len(y_train), batch_size, shuffle=True, seed=seed * 100003 + epoch):
            with new_tape():
                loss = nll_loss(train_logits(idx), y_train[idx])
                backward(loss)
            opt.step()
            losses.append(loss.item())
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise DivergenceError(f"non-finite fine-tuning loss at epoch {epoch}", epoch=epoch)
        f1 = weighted_f1(valid_predictions(), y_valid, train.class_count)
        record.epochs.append({"epoch": epoch, "loss": mean_loss, "valid_f1": f1})
        if stopper.update(f1, ensemble.parameter_snapshot()) == "stop":
            record.stopped_early = True
            break
    if stopper.best_checkpoint is not None:
        ensemble.load_parameter_snapshot(stopper.best_checkpoint)
        record.best_epoch = stopper.best_epoch
        record.best_valid_f1 = stopper.best_score
    return record


# ---------------------------------------------------------------------------
# strategy comparison


@dataclass
class ComparisonRow:
    strategy: str
    seed: int
    test_accuracy: float
    weighted_f1: float
    params_total: int
    params_trainable: int
    flops_fwd: int

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "test_accuracy": self.test_accuracy,
            "weighted_f1": self.weighted_f1,
            "params_total": self.params_total,
            "params_trainable": self.params_trainable,
            "flops_fwd": self.flops_fwd,
        }


@dataclass
class ComparisonResult:
    rows: list[ComparisonRow]
    finetune_records: dict[str, list[FineTuneRecord]]
    weak_test_accuracies: list[float]
    # tuned combination-layer parameters per adaptive seed, so callers can
    # persist the best run without retraining it
    adaptive_parameters: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    def summary_rows(self) -> list[ComparisonRow]:
        out = []
        for strategy in dict.fromkeys(r.strategy for r in self.rows):
            group = [r for r in self.rows if r.strategy == strategy]
            out.append(
                ComparisonRow(
                    strategy=f"{strategy}_median",
                    seed=-1,
                    test_accuracy=float(np.median([r.test_accuracy for r in group])),
                    weighted_f1=float(np.median([r.weighted_f1 for r in group])),
                    params_total=group[0].params_total,
                    params_trainable=group[0].params_trainable,
                    flops_fwd=group[0].flops_fwd,
                )
            )
        return out


def _batched_predict(model, x_all: np.ndarray, batch_size: int = 128) -> np.ndarray:
    preds = []
    for idx in batch_iter(len(x_all), batch_size):
        preds.append(model.predict(Tensor(x_all[idx])))
    return np.concatenate(preds)


def run_comparison(
    learners: Sequence[WeakLearner],
    train: Dataset,
    valid: Dataset,
    test: Dataset,
    seeds: Sequence[int],
    opt_config: OptimizerConfig,
    strategies: Sequence[str] = ("adaptive", "output", "vote"),
    batch_size: int = 50,
    max_epochs: int = 100,
    patience: int = 10,
    pre_spec: PreprocessSpec | None = None,
    resize_kernel: str = "bilinear",
) -> ComparisonResult:
    """Evaluate the requested ensemble strategies on the test split, per seed.

    ``learners`` must retain their heads; frozen stripped clones feed the
    adaptive strategy.  Complexity columns come from the static analyzer.
    """
    from .complexity import (
        adaptive_ensemble_complexity,
        output_combination_complexity,
        voting_complexity,
        weak_learner_complexity,
    )
    from .model import strip_head_and_freeze

    classes = train.class_count
    size = learners[0].input_size
    if pre_spec is None:
        pre_spec = PreprocessSpec((size, size), (0.5,) * 3, (0.25,) * 3)
    x_test = preprocess(test.images, pre_spec, kernel=resize_kernel).data
    y_test = test.labels

    weak_preds = []
    with no_grad():
        for lrn in learners:
            weak_preds.append(_batched_predict(lrn, x_test))
    weak_acc = [accuracy(p, y_test) for p in weak_preds]

    extractors = [strip_head_and_freeze(lrn.clone()) for lrn in learners]
    weak_reports = [weak_learner_complexity(lrn) for lrn in learners]
    complexity_by_strategy = {
        "adaptive": adaptive_ensemble_complexity(extractors, classes),
        "output": output_combination_complexity(weak_reports, len(learners), classes),
        "vote": voting_complexity(weak_reports),
    }

    rows: list[ComparisonRow] = []
    finetune_records: dict[str, list[FineTuneRecord]] = {}
    adaptive_parameters: dict[int, dict[str, np.ndarray]] = {}
    for strategy in strategies:
        comp = complexity_by_strategy[strategy]
        for seed in seeds:
            if strategy == "vote":
                preds = majority_vote(weak_preds)
            else:
                if strategy == "adaptive":
                    ens = AdaptiveEnsemble(extractors, classes, seed=seed)
                else:
                    ens = OutputCombinationEnsemble(learners, classes, seed=seed)
                rec = fine_tune_ensemble(
                    ens,
                    train,
                    valid,
                    opt_config,
                    EarlyStopper(patience),
                    batch_size=batch_size,
                    max_epochs=max_epochs,
                    pre_spec=pre_spec,
                    resize_kernel=resize_kernel,
                    seed=seed,
                )
                finetune_records.setdefault(strategy, []).append(rec)
                if strategy == "adaptive":
                    adaptive_parameters[seed] = ens.parameter_snapshot()
                preds = _batched_predict(ens, x_test)
            rows.append(
                ComparisonRow(
                    strategy=strategy,
                    seed=seed,
                    test_accuracy=accuracy(preds, y_test),
                    weighted_f1=weighted_f1(preds, y_test, classes),
                    params_total=comp.params_total,
                    params_trainable=comp.params_trainable,
                    flops_fwd=comp.flops_fwd,
                )
            )
    return ComparisonResult(
        rows=rows,
        finetune_records=finetune_records,
        weak_test_accuracies=weak_acc,
        adaptive_parameters=adaptive_parameters,
    )
