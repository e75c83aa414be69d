"""The two-phase experiment pipeline behind the CLI.

Phase 1 splits the training data into N disjoint stratified subsets and
trains one weak learner per subset until it overfits.  Phase 2 loads the
listed weak checkpoints, freezes their extractors, fine-tunes the adaptive
combination layer once per seed, and reports a comparison against majority
voting and output-level combination.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import (
    load_ensemble_checkpoint,
    load_weak_checkpoint,
    save_ensemble_checkpoint,
    save_weak_checkpoint,
)
from .config import ExperimentConfig, SyntheticSpec, parse_dataset_field
from .data import (
    Dataset,
    PreprocessSpec,
    SplitPlan,
    batch_iter,
    generate_synthetic,
    load_dataset,
    preprocess,
    semantic_split_override,
    stratified_disjoint_split,
)
from .ensemble import AdaptiveEnsemble, ComparisonResult, run_comparison
from .errors import CheckpointError, ConfigError
from .metrics import accuracy, confusion, weighted_f1
from .model import build_scaled_cnn, strip_head_and_freeze, tiny_base_stack, train_weak_overfit
from .report import emit_report, render_figures
from .tensor import Tensor, no_grad

__all__ = [
    "prepare_datasets",
    "prepare_split",
    "run_phase1",
    "run_phase2",
    "evaluate_checkpoint",
    "Phase1Result",
    "Phase2Result",
    "EvalResult",
]

logger = logging.getLogger(__name__)

# seed offsets for the synthetic valid/test splits (patterns stay shared)
_VALID_SEED_OFFSET = 1_000_003
_TEST_SEED_OFFSET = 2_000_003


def preprocess_spec(cfg: ExperimentConfig) -> PreprocessSpec:
    return PreprocessSpec(
        (cfg.input_size, cfg.input_size),
        tuple(float(m) for m in cfg.channel_means),
        tuple(float(s) for s in cfg.channel_stds),
    )


def prepare_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Train/valid/test datasets from a synthetic spec or a container directory.

    Synthetic valid/test splits use twice the training per-class count: at
    desk scale the held-out measurements need the statistics more than the
    training loop needs the images.
    """
    spec = parse_dataset_field(cfg.dataset)
    base = cfg.seeds[0]
    if isinstance(spec, SyntheticSpec):
        size = (spec.channels, spec.height, spec.width)
        held_out = 2 * spec.per_class
        train = generate_synthetic(spec.classes, spec.per_class, size, seed=base, pattern_seed=base)
        valid = generate_synthetic(
            spec.classes, held_out, size, seed=base + _VALID_SEED_OFFSET, pattern_seed=base
        )
        test = generate_synthetic(
            spec.classes, held_out, size, seed=base + _TEST_SEED_OFFSET, pattern_seed=base
        )
        valid.split_tag = "valid"
        test.split_tag = "test"
        return train, valid, test
    root = Path(spec)
    if not root.is_dir():
        raise ConfigError(
            f"dataset: {spec!r} is not a directory (expected train.aeib/valid.aeib/test.aeib inside)"
        )
    return (
        load_dataset(root / "train.aeib", "train"),
        load_dataset(root / "valid.aeib", "valid"),
        load_dataset(root / "test.aeib", "test"),
    )


def prepare_split(cfg: ExperimentConfig, train: Dataset) -> SplitPlan:
    if cfg.split_override:
        return semantic_split_override(train, [list(g) for g in cfg.split_override])
    return stratified_disjoint_split(train, cfg.ensemble_size, seed=cfg.seeds[0])


@dataclass
class Phase1Result:
    checkpoint_paths: list[Path]
    split_path: Path
    histories: list[list[dict]]
    valid_accuracies: list[float]


def run_phase1(cfg: ExperimentConfig, out_dir) -> Phase1Result:
    """Split, train N weak learners to overfit, persist checkpoints and the plan."""
    if cfg.ensemble_module_list:
        raise ConfigError("phase 1 expects an empty ensemble_module_list")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, valid, _ = prepare_datasets(cfg)
    plan = prepare_split(cfg, train)
    split_path = out / "split_plan.txt"
    plan.save(split_path)

    pre = preprocess_spec(cfg)
    x_valid = preprocess(valid.images, pre, kernel=cfg.resize_kernel).data
    base = cfg.seeds[0]
    paths: list[Path] = []
    histories: list[list[dict]] = []
    valid_accs: list[float] = []
    for i in range(plan.n_subsets):
        subset = train.subset(plan.subset_indices(i))
        model = build_scaled_cnn(
            tiny_base_stack(cfg.activation),
            cfg.scaling,
            train.class_count,
            input_size=cfg.input_size,
            seed=base * 100 + i,
        )
        record = train_weak_overfit(
            model,
            subset,
            cfg.optimizer,
            cfg.phase1.max_epochs,
            batch_size=cfg.phase1.batch_size,
            pre_spec=pre,
            resize_kernel=cfg.resize_kernel,
            seed=base * 10 + i,
        )
        preds = []
        with no_grad():
            for idx in batch_iter(len(valid), 128):
                preds.append(np.argmax(model.forward_logits(Tensor(x_valid[idx])).data, axis=1))
        valid_acc = accuracy(np.concatenate(preds), valid.labels)
        logger.info(
            "weak %d: %d epochs, train acc %.3f, valid acc %.3f",
            i, len(record.epochs), record.final_train_accuracy, valid_acc,
        )
        path = out / f"weak_{i}.ckpt"
        save_weak_checkpoint(
            path,
            model,
            history=record.epochs,
            metrics={
                "train_accuracy": record.final_train_accuracy,
                "valid_accuracy": valid_acc,
                "reached_overfit": record.reached_overfit,
            },
        )
        paths.append(path)
        histories.append(record.epochs)
        valid_accs.append(valid_acc)

    render_figures([], out / "figures", weak_histories=histories)
    return Phase1Result(paths, split_path, histories, valid_accs)


@dataclass
class Phase2Result:
    ensemble_path: Path
    best_seed: int
    comparison: ComparisonResult
    report_paths: dict


def run_phase2(cfg: ExperimentConfig, out_dir) -> Phase2Result:
    """Fine-tune the adaptive ensemble per seed; report against the baselines."""
    if len(cfg.ensemble_module_list) != cfg.ensemble_size:
        raise ConfigError(
            f"ensemble_module_list: expected {cfg.ensemble_size} checkpoints, "
            f"got {len(cfg.ensemble_module_list)}"
        )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, valid, test = prepare_datasets(cfg)
    pre = preprocess_spec(cfg)

    learners = []
    for entry in cfg.ensemble_module_list:
        model, _ = load_weak_checkpoint(entry)
        if model.classes != train.class_count:
            raise CheckpointError(
                f"{entry}: checkpoint has {model.classes} classes, dataset has {train.class_count}"
            )
        learners.append(model)

    comparison = run_comparison(
        learners,
        train,
        valid,
        test,
        seeds=list(cfg.seeds),
        opt_config=cfg.optimizer,
        batch_size=cfg.phase2.batch_size,
        max_epochs=cfg.phase2.max_epochs,
        patience=cfg.phase2.patience,
        pre_spec=pre,
        resize_kernel=cfg.resize_kernel,
    )

    # persist the best-by-validation-F1 adaptive run (no retraining: the
    # tuned combination parameters come straight from the comparison)
    adaptive_records = comparison.finetune_records["adaptive"]
    best = max(adaptive_records, key=lambda r: r.best_valid_f1)
    extractors = [strip_head_and_freeze(lrn.clone()) for lrn in learners]
    ensemble = AdaptiveEnsemble(extractors, train.class_count, seed=best.seed)
    ensemble.load_parameter_snapshot(comparison.adaptive_parameters[best.seed])
    best_row = next(
        r for r in comparison.rows if r.strategy == "adaptive" and r.seed == best.seed
    )
    ensemble_path = out / "ensemble.ckpt"
    save_ensemble_checkpoint(
        ensemble_path,
        ensemble,
        history={"epochs": [e for e in best.epochs]},
        metrics={
            "best_valid_f1": best.best_valid_f1,
            "test_accuracy": best_row.test_accuracy,
            "test_weighted_f1": best_row.weighted_f1,
        },
    )

    rows = [r.as_dict() for r in comparison.rows] + [r.as_dict() for r in comparison.summary_rows()]
    curves = {
        strategy: [rec.valid_f1_curve for rec in records]
        for strategy, records in comparison.finetune_records.items()
    }
    report_paths = emit_report(
        rows, out, finetune_curves=curves, weak_accuracies=comparison.weak_test_accuracies
    )
    return Phase2Result(ensemble_path, best.seed, comparison, report_paths)


@dataclass
class EvalResult:
    accuracy: float
    weighted_f1: float
    confusion: np.ndarray
    split_tag: str


def evaluate_checkpoint(checkpoint_path, cfg: ExperimentConfig, split: str = "test") -> EvalResult:
    """Metrics of a weak or ensemble checkpoint on one dataset split."""
    train, valid, test = prepare_datasets(cfg)
    ds = {"train": train, "valid": valid, "test": test}[split]
    pre = preprocess_spec(cfg)
    x_all = preprocess(ds.images, pre, kernel=cfg.resize_kernel).data

    from .checkpoint import load_checkpoint

    manifest, _ = load_checkpoint(checkpoint_path)
    kind = manifest.get("kind")
    if kind == "weak":
        model, _ = load_weak_checkpoint(checkpoint_path)
    elif kind == "adaptive_ensemble":
        model, _ = load_ensemble_checkpoint(checkpoint_path)
    else:
        raise CheckpointError(f"{checkpoint_path}: unknown checkpoint kind {kind!r}")

    preds = []
    with no_grad():
        for idx in batch_iter(len(ds), 128):
            preds.append(model.predict(Tensor(x_all[idx])))
    predictions = np.concatenate(preds)
    return EvalResult(
        accuracy=accuracy(predictions, ds.labels),
        weighted_f1=weighted_f1(predictions, ds.labels, ds.class_count),
        confusion=confusion(predictions, ds.labels, ds.class_count),
        split_tag=split,
    )
