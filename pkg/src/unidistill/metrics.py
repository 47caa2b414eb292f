"""Task metrics and the aggregate multi-task score.

The aggregate is the signed average relative change versus per-task baseline
values, in percent, with the sign flipped for lower-is-better metrics so that
positive always means better. The same formula serves the multi-domain
setting with accuracy metrics (there is no separate definition).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericalError


@dataclass
class TaskResult:
    task_id: str
    value: float
    lower_is_better: bool

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ConfigurationError(f"non-finite result for task {self.task_id!r}")


def miou(pred, gt, n_classes: int) -> float:
    """Mean intersection-over-union; classes with zero union are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ConfigurationError(
                f"{name} labels outside [0, {n_classes}): {arr.min()}..{arr.max()}"
            )
    conf = np.bincount(
        (n_classes * gt.reshape(-1) + pred.reshape(-1)).astype(np.int64),
        minlength=n_classes * n_classes,
    ).reshape(n_classes, n_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - inter
    keep = union > 0
    if not keep.any():
        raise ConfigurationError("no class has a nonzero union")
    return float((inter[keep] / union[keep]).mean())


def abs_err(pred, gt) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.abs(pred - gt).mean())


def mean_angle_err(pred, gt) -> float:
    """Mean angle between predicted and reference normals, in degrees.

    Expects the 3-vector channel on axis -3, i.e. (..., 3, H, W).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.ndim < 3 or pred.shape[-3] != 3:
        raise ConfigurationError(f"expected (..., 3, H, W) normals, got {pred.shape}")
    np_norm = np.linalg.norm(pred, axis=-3)
    ng_norm = np.linalg.norm(gt, axis=-3)
    if (np_norm < 1e-12).any() or (ng_norm < 1e-12).any():
        raise NumericalError("zero normal vector in angle computation")
    cos = (pred * gt).sum(axis=-3) / (np_norm * ng_norm)
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    return float(ang.mean())


def accuracy(pred, gt) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigurationError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ConfigurationError("empty prediction array")
    return float((pred == gt).mean())


def _as_result_map(results) -> dict:
    if isinstance(results, dict):
        vals = list(results.values())
    else:
        vals = list(results)
    out = {}
    for r in vals:
        out[r.task_id] = r
    return out


def delta_mtl(results, baselines) -> float:
    """Signed average relative improvement over per-task baselines, percent.

    results and baselines are TaskResult collections over the same task set.
    Positive means the evaluated model beats the baselines on average.
    """
    res = _as_result_map(results)
    base = _as_result_map(baselines)
    if set(res) != set(base):
        raise ConfigurationError(
            f"task sets differ: {sorted(res)} vs {sorted(base)}"
        )
    if not res:
        raise ConfigurationError("empty result set")
    total = 0.0
    for tid, r in res.items():
        b = base[tid]
        if r.lower_is_better != b.lower_is_better:
            raise ConfigurationError(f"direction flag mismatch for task {tid!r}")
        if b.value == 0:
            raise ZeroDivisionError(f"baseline for task {tid!r} is zero")
        sign = -1.0 if r.lower_is_better else 1.0
        total += sign * (r.value - b.value) / b.value
    return 100.0 * total / len(res)


METRIC_FNS = {
    "miou": lambda pred, gt, task: miou(pred, gt, task.out_channels),
    "abs_err": lambda pred, gt, task: abs_err(pred, gt),
    "mean_angle_err": lambda pred, gt, task: mean_angle_err(pred, gt),
    "accuracy": lambda pred, gt, task: accuracy(pred, gt),
}


# ---------------------------------------------------------------------------
# table output
# ---------------------------------------------------------------------------


def format_table(headers, rows) -> str:
    """Aligned text table; numbers rendered with 4 decimals unless int."""

    def cell(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)

    grid = [[cell(v) for v in row] for row in rows]
    widths = [
        max(len(h), *(len(r[i]) for r in grid)) if grid else len(h)
        for i, h in enumerate(headers)
    ]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for r in grid:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    return "\n".join(lines) + "\n"


def write_table(headers, rows, csv_path=None, text_path=None) -> str:
    """Write the same rows as CSV and as an aligned text table."""
    text = format_table(headers, rows)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(headers)
            for row in rows:
                w.writerow(row)
    if text_path is not None:
        Path(text_path).write_text(text)
    return text
