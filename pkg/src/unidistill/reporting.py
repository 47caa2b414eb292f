"""Run reporting: tables and plots rendered from run-directory artifacts.

Everything here is deterministic given the same inputs, so a re-run
overwrites files with identical bytes (PNGs included: the encoder metadata
that would vary between runs is stripped).
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import DependencyError
from .metrics import TaskResult, delta_mtl, format_table, write_table

# keep savefig byte-stable across matplotlib versions/runs
_PNG_META = {"Software": None}


def read_jsonl(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DependencyError(f"missing log file: {path}")
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def plot_loss_curves(log_path, out_png) -> Path:
    """Total objective plus per-task task-loss terms over iterations."""
    records = read_jsonl(log_path)
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)

    its = [r["iteration"] for r in records]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    if records and "total" in records[0]:
        ax.plot(its, [r["total"] for r in records], label="total", color="black", lw=1.4)
        task_keys = sorted(k for k in records[0] if k.endswith("/task"))
        for key in task_keys:
            ax.plot(its, [r.get(key) for r in records], label=key[: -len("/task")], lw=0.9)
    else:  # single-task teacher log
        ax.plot(its, [r["value"] for r in records], label=records[0].get("task", "loss"), lw=1.2)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return out_png


def plot_delta_bars(deltas: dict, out_png) -> Path:
    """Bar chart of the relative multi-task gain per method, in percent."""
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    names = list(deltas)
    values = [deltas[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(names)), 3.6))
    colors = ["#2266aa" if v >= 0 else "#aa4422" for v in values]
    ax.bar(range(len(names)), values, color=colors)
    ax.axhline(0.0, color="black", lw=0.8)
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("multi-task gain (%)")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:+.2f}", ha="center", va="bottom" if v >= 0 else "top", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return out_png


def _as_results(block: dict) -> dict:
    out = {}
    for tid, rec in block.items():
        out[tid] = TaskResult(
            task_id=tid,
            value=float(rec["value"]),
            lower_is_better=bool(rec["lower_is_better"]),
        )
    return out


def render_mtl_report(results: dict, out_dir=None) -> str:
    """Turn an mtl results document into tables, plots, and printable text.

    `results` holds "baseline" ({task: {metric, value, lower_is_better}})
    and "methods" ({name: same shape}). The relative gain of each method
    over the baseline is appended as a final column.
    """
    baseline = _as_results(results["baseline"])
    task_ids = sorted(baseline)
    methods = results.get("methods", {})

    header = ["method"]
    for tid in task_ids:
        metric = results["baseline"][tid].get("metric", "value")
        arrow = "v" if baseline[tid].lower_is_better else "^"
        header.append(f"{tid} ({metric} {arrow})")
    header.append("gain%")

    rows = [["baseline"] + [f"{baseline[tid].value:.4f}" for tid in task_ids] + ["+0.00"]]
    deltas = {}
    for name in sorted(methods):
        res = _as_results(methods[name])
        d = delta_mtl(res, baseline)
        deltas[name] = d
        rows.append([name] + [f"{res[tid].value:.4f}" for tid in task_ids] + [f"{d:+.2f}"])

    text = format_table(header, rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table(header, rows, out_dir / "mtl_results.csv", out_dir / "mtl_results.txt")
        if deltas:
            plot_delta_bars(deltas, out_dir / "mtl_gain.png")
        (out_dir / "mtl_deltas.json").write_text(
            json.dumps({k: round(v, 6) for k, v in sorted(deltas.items())}, indent=2)
        )
    return text


def render_fewshot_report(doc: dict, out_dir=None) -> str:
    """Tabulate per-domain few-shot accuracies with confidence bands."""
    header = ["domain", "episodes", "ncc acc", "±", "adapted acc", "±"]
    rows = []
    for domain in sorted(doc):
        r = doc[domain]
        rows.append([
            domain,
            str(r["episodes"]),
            f"{r['ncc_acc']:.4f}",
            f"{r['ncc_ci95']:.4f}",
            f"{r['adapted_acc']:.4f}",
            f"{r['adapted_ci95']:.4f}",
        ])
    text = format_table(header, rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table(header, rows, out_dir / "fewshot_results.csv", out_dir / "fewshot_results.txt")
    return text


def render_retrieval_report(doc: dict, out_dir=None) -> str:
    header = ["split", "samples"] + [f"recall@{k}" for k in doc["ks"]]
    rows = [[doc["split"], str(doc["n"])] + [f"{doc['recall'][str(k)]:.4f}" for k in doc["ks"]]]
    text = format_table(header, rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_table(
            header, rows, out_dir / "retrieval_results.csv", out_dir / "retrieval_results.txt"
        )
    return text
