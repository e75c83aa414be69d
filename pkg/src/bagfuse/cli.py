"""Command-line entry point.

Subcommands: ``split``, ``train-weak``, ``train-ensemble``, ``eval``,
``complexity``, ``cost-model``, ``report``.  Errors exit nonzero with a
category-tagged message on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .errors import BagfuseError

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bagfuse",
        description="Adaptive ensembling of bagged compact CNNs, plus complexity analysis.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p, out_required=True):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed list with one seed")
        p.add_argument("--out", required=out_required, default=".", help="output directory")

    p = sub.add_parser("split", help="write the stratified disjoint split plan")
    add_config(p)

    p = sub.add_parser("train-weak", help="phase 1: train one weak learner per subset to overfit")
    add_config(p)

    p = sub.add_parser("train-ensemble", help="phase 2: fine-tune the combination layer per seed and report")
    add_config(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    add_config(p, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")

    p = sub.add_parser("complexity", help="static parameter/FLOPs report for an architecture")
    p.add_argument("--arch", choices=("b0", "tiny"), default="b0")
    p.add_argument("--input-size", type=int, default=None, help="defaults: 224 for b0, 32 for tiny")
    p.add_argument("--classes", type=int, default=4, help="head size for the tiny architecture")
    p.add_argument("--phi", type=float, default=0.0, help="compound coefficient for the tiny architecture")
    p.add_argument("--out", default="-", help="CSV destination ('-' for stdout)")

    p = sub.add_parser("cost-model", help="per-image pipeline FLOPs from the cost model")
    p.add_argument("--f-fwd", type=float, required=True, help="forward FLOPs per image")
    p.add_argument("--f-back", type=float, default=None, help="backward FLOPs (default: same as forward)")
    p.add_argument("--p", type=float, required=True, help="end-to-end trainable parameter count")
    p.add_argument("--f-upd", type=float, default=None, help="update FLOPs (default: 20 * P)")
    p.add_argument("--a", type=int, default=2, help="number of end-to-end trainings")
    p.add_argument("--b", type=int, default=5, help="number of fine-tuning runs")
    p.add_argument("--n", type=int, default=2, help="ensemble size")
    p.add_argument("--serial", action="store_true", help="serial accounting instead of parallel")

    p = sub.add_parser("report", help="re-render CSV/summary/figures from a records.json")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    return parser


def _load_config(args):
    from .config import parse_config

    cfg = parse_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
        cfg.validate()
    return cfg


def _cmd_split(args) -> int:
    from .pipeline import prepare_datasets, prepare_split

    cfg = _load_config(args)
    train, _, _ = prepare_datasets(cfg)
    plan = prepare_split(cfg, train)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "split_plan.txt"
    plan.save(path)
    print(f"wrote {path} (subset sizes: {plan.subset_sizes().tolist()})")
    return 0


def _cmd_train_weak(args) -> int:
    from .pipeline import run_phase1

    cfg = _load_config(args)
    result = run_phase1(cfg, args.out)
    for i, (path, acc) in enumerate(zip(result.checkpoint_paths, result.valid_accuracies)):
        final = result.histories[i][-1]["train_accuracy"] if result.histories[i] else float("nan")
        print(f"weak {i}: {path} train_acc={final:.4f} valid_acc={acc:.4f}")
    print(f"split plan: {result.split_path}")
    return 0


def _cmd_train_ensemble(args) -> int:
    from .pipeline import run_phase2

    cfg = _load_config(args)
    result = run_phase2(cfg, args.out)
    print(f"ensemble checkpoint: {result.ensemble_path} (best seed {result.best_seed})")
    print(f"report: {result.report_paths['csv']}")
    print(f"summary: {result.report_paths['summary']}")
    for fig in result.report_paths["figures"]:
        print(f"figure: {fig}")
    return 0


def _cmd_eval(args) -> int:
    from .pipeline import evaluate_checkpoint

    cfg = _load_config(args)
    result = evaluate_checkpoint(args.checkpoint, cfg, args.split)
    print(f"split: {result.split_tag}")
    print(f"accuracy: {result.accuracy:.6f}")
    print(f"weighted_f1: {result.weighted_f1:.6f}")
    print("confusion:")
    for row in result.confusion.tolist():
        print("  " + " ".join(f"{v:5d}" for v in row))
    if args.out and args.out != ".":
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "split": result.split_tag,
            "accuracy": result.accuracy,
            "weighted_f1": result.weighted_f1,
            "confusion": result.confusion.tolist(),
        }
        (out / "eval.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
        print(f"wrote {out / 'eval.json'}")
    return 0


def _cmd_complexity(args) -> int:
    from .complexity import efficientnet_b0_descriptor, model_complexity
    from .model import LayerSpec, ScalingConfig, build_scaled_cnn, tiny_base_stack
    from .report import CSV_COLUMNS, write_report_csv

    if args.arch == "b0":
        specs = efficientnet_b0_descriptor()
        input_size = args.input_size or 224
        report = model_complexity(specs, (3, input_size, input_size))
        label = "b0"
    else:
        input_size = args.input_size or 32
        model = build_scaled_cnn(
            tiny_base_stack(), ScalingConfig(phi=args.phi), args.classes, input_size=input_size
        )
        specs = list(model.extractor_specs) + [
            LayerSpec("linear", model.feature_dim, model.classes, name="head"),
            LayerSpec("logsoftmax", name="head.logsoftmax"),
        ]
        report = model_complexity(specs, (3, model.input_size, model.input_size))
        label = f"tiny(phi={args.phi})"

    row = {
        "strategy": label,
        "seed": None,
        "test_accuracy": None,
        "weighted_f1": None,
        "params_total": report.params_total,
        "params_trainable": report.params_trainable,
        "flops_fwd": report.flops_fwd,
    }
    if args.out == "-":
        print(",".join(CSV_COLUMNS))
        print(",".join("" if row[c] is None else str(row[c]) for c in CSV_COLUMNS))
    else:
        write_report_csv([row], args.out)
        print(f"wrote {args.out}")
    print(
        f"{label} @ {input_size}x{input_size}: params {report.params_total:,} "
        f"({report.params_total / 1e6:.3f} M), forward FLOPs {report.flops_fwd:,} "
        f"({report.flops_fwd / 1e9:.4f} G)"
    )
    return 0


def _cmd_cost_model(args) -> int:
    from .complexity import CostModel, pipeline_cost

    model = CostModel(
        f_fwd=args.f_fwd,
        f_back=args.f_back if args.f_back is not None else args.f_fwd,
        p_params=args.p,
        f_upd=args.f_upd,
        a_end_to_end=args.a,
        b_fine_tune=args.b,
        n_learners=args.n,
    )
    summary = pipeline_cost(model, parallel=not args.serial)
    print(f"mode: {summary.mode}")
    for name, value in summary.terms.items():
        print(f"  {name}: {value:,.0f} FLOPs ({value / 1e9:.4f} G)")
    print(f"total per image: {summary.total:,.0f} FLOPs ({summary.total / 1e9:.4f} G)")
    return 0


def _cmd_report(args) -> int:
    from .report import emit_report

    records_path = Path(args.records)
    if not records_path.is_file():
        raise BagfuseError(f"records file not found: {records_path}")
    payload = json.loads(records_path.read_text(encoding="utf-8"))
    paths = emit_report(
        payload.get("rows", []),
        args.out,
        finetune_curves=payload.get("finetune_curves") or None,
        weak_histories=payload.get("weak_histories") or None,
        weak_accuracies=payload.get("weak_accuracies") or None,
    )
    print(f"report: {paths['csv']}")
    print(f"summary: {paths['summary']}")
    for fig in paths["figures"]:
        print(f"figure: {fig}")
    return 0


_COMMANDS = {
    "split": _cmd_split,
    "train-weak": _cmd_train_weak,
    "train-ensemble": _cmd_train_ensemble,
    "eval": _cmd_eval,
    "complexity": _cmd_complexity,
    "cost-model": _cmd_cost_model,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except BagfuseError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
