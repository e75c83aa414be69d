"""Comparison reports: delimited output, a text summary, and rendered figures.

The CSV schema is fixed: ``strategy,seed,test_accuracy,weighted_f1,
params_total,params_trainable,flops_fwd``.  Figures are written next to the
CSV under ``figures/``.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CSV_COLUMNS = (
    "strategy",
    "seed",
    "test_accuracy",
    "weighted_f1",
    "params_total",
    "params_trainable",
    "flops_fwd",
)

__all__ = ["CSV_COLUMNS", "write_report_csv", "summarize", "render_figures", "emit_report"]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def write_report_csv(rows: list[dict], path) -> None:
    """Rows are dicts keyed by CSV_COLUMNS; an empty list yields a header-only file."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(col)) for col in CSV_COLUMNS])


def summarize(rows: list[dict], weak_accuracies: list[float] | None = None) -> str:
    lines = ["strategy comparison summary", "=" * 27]
    if not rows:
        lines.append("no rows recorded")
        return "\n".join(lines) + "\n"
    strategies = list(
        dict.fromkeys(r["strategy"] for r in rows if not str(r["strategy"]).endswith("_median"))
    )
    for strategy in strategies:
        group = [r for r in rows if r["strategy"] == strategy]
        accs = [r["test_accuracy"] for r in group]
        lines.append(
            f"{strategy:>16s}: median acc {float(np.median(accs)):.4f} over {len(group)} row(s), "
            f"params {group[0]['params_total']:,} ({group[0]['params_trainable']:,} trainable), "
            f"fwd FLOPs {group[0]['flops_fwd']:,}"
        )
    if weak_accuracies:
        joined = ", ".join(f"{a:.4f}" for a in weak_accuracies)
        lines.append(f"{'weak learners':>16s}: test accuracies [{joined}]")
    best = max(rows, key=lambda r: r["test_accuracy"])
    lines.append(
        f"best accuracy: {best['test_accuracy']:.4f} ({best['strategy']}, seed {best['seed']})"
    )
    return "\n".join(lines) + "\n"


def render_figures(
    rows: list[dict],
    out_dir,
    finetune_curves: dict[str, list[list[float]]] | None = None,
    weak_histories: list[list[dict]] | None = None,
) -> list[Path]:
    """Render comparison/training figures to ``out_dir``; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    base_rows = [r for r in rows if not str(r["strategy"]).endswith("_median")]
    if base_rows:
        strategies = list(dict.fromkeys(r["strategy"] for r in base_rows))
        fig, ax = plt.subplots(figsize=(6, 4))
        for i, strategy in enumerate(strategies):
            accs = [r["test_accuracy"] for r in base_rows if r["strategy"] == strategy]
            ax.scatter([i] * len(accs), accs, alpha=0.6, label=None)
            ax.hlines(float(np.median(accs)), i - 0.25, i + 0.25, color="k")
        ax.set_xticks(range(len(strategies)), strategies)
        ax.set_ylabel("test accuracy")
        ax.set_title("ensemble strategies (dots: seeds, bar: median)")
        fig.tight_layout()
        path = out / "strategy_comparison.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if finetune_curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        for strategy, curves in finetune_curves.items():
            for i, curve in enumerate(curves):
                ax.plot(curve, alpha=0.7, label=strategy if i == 0 else None)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation weighted F1")
        ax.set_title("combination-layer fine-tuning")
        ax.legend()
        fig.tight_layout()
        path = out / "finetune_validation_f1.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    if weak_histories:
        fig, axes = plt.subplots(1, 2, figsize=(9, 4))
        for i, hist in enumerate(weak_histories):
            epochs = [e["epoch"] for e in hist]
            axes[0].plot(epochs, [e["loss"] for e in hist], label=f"weak {i}")
            axes[1].plot(epochs, [e["train_accuracy"] for e in hist], label=f"weak {i}")
        axes[0].set_xlabel("epoch")
        axes[0].set_ylabel("training loss")
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("training accuracy")
        axes[1].axhline(1.0, color="k", linestyle=":", linewidth=0.8)
        axes[0].legend()
        fig.suptitle("weak-learner overfitting")
        fig.tight_layout()
        path = out / "weak_training.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    return written


def emit_report(
    rows: list[dict],
    out_dir,
    finetune_curves: dict[str, list[list[float]]] | None = None,
    weak_histories: list[list[dict]] | None = None,
    weak_accuracies: list[float] | None = None,
) -> dict[str, Path]:
    """Write report.csv, summary.txt, records.json, and figures under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "report.csv"
    write_report_csv(rows, csv_path)
    summary = summarize(rows, weak_accuracies)
    summary_path = out / "summary.txt"
    summary_path.write_text(summary, encoding="utf-8")
    records_path = out / "records.json"
    records_path.write_text(
        json.dumps(
            {
                "rows": rows,
                "finetune_curves": finetune_curves or {},
                "weak_histories": weak_histories or [],
                "weak_accuracies": weak_accuracies or [],
            },
            indent=2,
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    figures = render_figures(rows, out / "figures", finetune_curves, weak_histories)
    return {"csv": csv_path, "summary": summary_path, "records": records_path, "figures": figures}
