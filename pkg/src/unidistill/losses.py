"""Distillation losses and the combined training objective.

Feature alignment compares adapted student features against frozen teacher
features under one of four distances: per-location normalized L2, cosine,
attention transfer (channel-mean spatial maps), or an RBF-kernel centered
alignment score turned into a loss. Prediction alignment matches decoder
outputs, KL for classification and the task's own distance for dense
regression. Teacher tensors are always detached; no gradient reaches them.

All losses are pure functions of their inputs and accept float32 or float64
tensors (tests use float64 for finite-difference gradient checks).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import Batch, TaskSpec
from .errors import ConfigurationError, NumericalError, ShapeError

EPS = 1e-12

FEATURE_LOSSES = ("norm_l2", "cosine", "attention_transfer", "cka_rbf")
RESERVED_FEATURE_LOSSES = ("cka_linear",)
PREDICTION_LOSSES = ("none", "kl", "match_task_loss")


# ---------------------------------------------------------------------------
# schedules and configuration
# ---------------------------------------------------------------------------


@dataclass
class AnnealSchedule:
    """Linear decay from `start` to zero over `horizon` iterations."""

    start: float
    horizon: int
    active: bool = True


def anneal_weight(sched: AnnealSchedule, iteration: int) -> float:
    if sched.horizon <= 0:
        raise ConfigurationError(f"anneal horizon must be positive, got {sched.horizon}")
    return sched.start * max(0.0, 1.0 - iteration / sched.horizon)


@dataclass
class TermWeights:
    """Static weights for one task's objective terms, with optional anneals."""

    task: float = 1.0
    feature: float = 0.0
    prediction: float = 0.0
    feature_anneal: Optional[AnnealSchedule] = None
    prediction_anneal: Optional[AnnealSchedule] = None


@dataclass
class DistillationConfig:
    """Per-task term weights plus the loss variants they scale.

    `weights` maps task id to TermWeights; tasks not listed fall back to a
    bare task loss (weight 1, no distillation).
    """

    weights: dict = field(default_factory=dict)
    feature_loss: str = "norm_l2"
    prediction_loss: str = "none"
    bandwidth_frac: float = 0.5

    def __post_init__(self):
        if self.feature_loss in RESERVED_FEATURE_LOSSES:
            raise NotImplementedError(
                f"feature loss {self.feature_loss!r} is reserved but not implemented"
            )
        if self.feature_loss not in FEATURE_LOSSES:
            raise ConfigurationError(f"unknown feature loss: {self.feature_loss!r}")
        if self.prediction_loss not in PREDICTION_LOSSES:
            raise ConfigurationError(f"unknown prediction loss: {self.prediction_loss!r}")
        if not (self.bandwidth_frac > 0):
            raise ConfigurationError("bandwidth_frac must be positive")
        for tid, w in self.weights.items():
            for name in ("task", "feature", "prediction"):
                v = getattr(w, name)
                if not np.isfinite(v) or v < 0:
                    raise ConfigurationError(
                        f"weight {name}={v!r} for task {tid!r} must be finite and >= 0"
                    )

    def for_task(self, task_id: str) -> TermWeights:
        return self.weights.get(task_id, TermWeights())

    @classmethod
    def dense_preset(cls, tasks) -> "DistillationConfig":
        """Dense multi-task default: feature alignment only, no prediction term.

        Weight 2 on the normals stream, 1 elsewhere.
        """
        weights = {}
        for t in tasks:
            f = 2.0 if t.loss == "cosine_normals" else 1.0
            weights[t.id] = TermWeights(task=1.0, feature=f, prediction=0.0)
        return cls(weights=weights, feature_loss="norm_l2", prediction_loss="none")

    @classmethod
    def domain_preset(
        cls,
        tasks,
        anchor: Optional[str] = None,
        anchor_weight: float = 4.0,
        anneal_horizon: Optional[int] = None,
    ) -> "DistillationConfig":
        """Multi-domain default: kernel-alignment features plus KL predictions.

        The anchor domain (the large one, when designated) gets a heavier
        weight, optionally annealed linearly to zero.
        """
        weights = {}
        for t in tasks:
            w = anchor_weight if t.id == anchor else 1.0
            tw = TermWeights(task=1.0, feature=w, prediction=w)
            if t.id == anchor and anneal_horizon:
                tw.feature_anneal = AnnealSchedule(w, anneal_horizon)
                tw.prediction_anneal = AnnealSchedule(w, anneal_horizon)
            weights[t.id] = tw
        return cls(weights=weights, feature_loss="cka_rbf", prediction_loss="kl")


def effective_weight(static: float, sched: Optional[AnnealSchedule], iteration: int) -> float:
    if sched is not None and sched.active:
        return anneal_weight(sched, iteration)
    return static


# ---------------------------------------------------------------------------
# feature distances
# ---------------------------------------------------------------------------


def _check_same_shape(m, s):
    if tuple(m.shape) != tuple(s.shape):
        raise ShapeError(f"feature shapes differ: {tuple(m.shape)} vs {tuple(s.shape)}")


def _unit_channels(t):
    # normalize each location's channel vector; dim 1 is channels for both
    # (B, C) and (B, C, H, W) layouts
    return t / t.norm(dim=1, keepdim=True).clamp_min(EPS)


def norm_l2_feature_loss(m: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Squared distance between per-location L2-normalized channel vectors.

    Summed over channels and locations, averaged over the batch. Invariant to
    positive per-location scaling of either argument. The teacher side `s` is
    detached.
    """
    _check_same_shape(m, s)
    diff = _unit_channels(m) - _unit_channels(s.detach())
    return (diff * diff).flatten(1).sum(dim=1).mean()


def cosine_feature_loss(m: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Mean over locations of one minus channel-vector cosine similarity."""
    _check_same_shape(m, s)
    cos = (_unit_channels(m) * _unit_channels(s.detach())).sum(dim=1)
    return (1.0 - cos).mean()


def attention_transfer_loss(m: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Squared L2 between normalized channel-mean spatial maps.

    Discards channel structure entirely: any per-location channel shuffle
    that preserves the channel mean leaves this loss unchanged.
    """
    _check_same_shape(m, s)
    if m.ndim != 4:
        raise ShapeError(f"attention transfer needs (B, C, H, W) maps, got {tuple(m.shape)}")
    am = m.mean(dim=1).flatten(1)
    at = s.detach().mean(dim=1).flatten(1)
    am = am / am.norm(dim=1, keepdim=True).clamp_min(EPS)
    at = at / at.norm(dim=1, keepdim=True).clamp_min(EPS)
    return ((am - at) ** 2).sum(dim=1).mean()


def _median(values: torch.Tensor) -> torch.Tensor:
    """Median as the middle of the sorted values (mean of two middles when even).

    Implemented by sorting so the bandwidth stays differentiable.
    """
    v, _ = torch.sort(values.flatten())
    n = v.numel()
    if n % 2 == 1:
        return v[n // 2]
    return 0.5 * (v[n // 2 - 1] + v[n // 2])


def _rbf_gram(x: torch.Tensor, bandwidth_frac: float) -> torch.Tensor:
    """RBF Gram matrix with a median-heuristic bandwidth.

    sigma = bandwidth_frac * median pairwise distance of the rows, recomputed
    per call, which makes the kernel invariant to isotropic scaling of x. A
    constant design (median zero) falls back to sigma = 1.
    """
    sq = (x * x).sum(dim=1)
    d2 = (sq[:, None] + sq[None, :] - 2.0 * (x @ x.t())).clamp_min(0.0)
    b = x.shape[0]
    iu = torch.triu_indices(b, b, offset=1)
    med = _median(torch.sqrt(d2[iu[0], iu[1]] + EPS))
    if float(med.detach()) <= 1e-9:
        sigma = torch.ones((), dtype=x.dtype, device=x.device)
    else:
        sigma = bandwidth_frac * med
    return torch.exp(-d2 / (2.0 * sigma * sigma))


def _as_matrix(feat: torch.Tensor) -> torch.Tensor:
    if feat.ndim == 2:
        return feat
    if feat.ndim == 4:
        return feat.flatten(1)
    raise ShapeError(f"expected (B, C) or (B, C, H, W) features, got {tuple(feat.shape)}")


def cka_rbf_similarity(M: torch.Tensor, S: torch.Tensor, bandwidth_frac: float = 0.5) -> torch.Tensor:
    """Centered alignment of two RBF Gram matrices, in [0, 1].

    Rows are instances; both arguments get their own median-heuristic
    bandwidth. The denominator is clamped at 1e-12 so near-constant designs
    saturate instead of dividing by zero.
    """
    M = _as_matrix(M)
    S = _as_matrix(S)
    if M.shape[0] != S.shape[0]:
        raise ShapeError(f"row counts differ: {M.shape[0]} vs {S.shape[0]}")
    b = M.shape[0]
    if b < 3:
        raise ConfigurationError(f"kernel alignment needs at least 3 rows, got {b}")
    P = _rbf_gram(M, bandwidth_frac)
    T = _rbf_gram(S, bandwidth_frac)
    H = torch.eye(b, dtype=M.dtype, device=M.device) - 1.0 / b
    num = torch.trace(P @ H @ T @ H)
    den = torch.sqrt((torch.trace(P @ H @ P @ H) * torch.trace(T @ H @ T @ H)).clamp_min(0.0))
    return num / den.clamp_min(EPS)


def cka_loss(M: torch.Tensor, S: torch.Tensor, bandwidth_frac: float = 0.5) -> torch.Tensor:
    """One minus the alignment score; gradient flows into M only."""
    return 1.0 - cka_rbf_similarity(M, S.detach(), bandwidth_frac)


def feature_distill_loss(
    name: str, m: torch.Tensor, s: torch.Tensor, bandwidth_frac: float = 0.5
) -> torch.Tensor:
    if name in RESERVED_FEATURE_LOSSES:
        raise NotImplementedError(f"feature loss {name!r} is reserved but not implemented")
    if name == "norm_l2":
        return norm_l2_feature_loss(m, s)
    if name == "cosine":
        return cosine_feature_loss(m, s)
    if name == "attention_transfer":
        return attention_transfer_loss(m, s)
    if name == "cka_rbf":
        return cka_loss(m, s, bandwidth_frac)
    raise ConfigurationError(f"unknown feature loss: {name!r}")


# ---------------------------------------------------------------------------
# task and prediction losses
# ---------------------------------------------------------------------------


def local_targets(task: TaskSpec, y: torch.Tensor) -> torch.Tensor:
    """Map stored labels to decoder-local class indices.

    Domain suites store globally disjoint labels; the decoder for domain d
    sees label % out_channels. For labels already in range this is a no-op.
    """
    if task.loss == "cross_entropy":
        return y % task.out_channels
    return y


def task_loss(task: TaskSpec, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """The supervised loss named by the task spec, averaged over the batch."""
    if task.loss == "cross_entropy":
        return F.cross_entropy(pred, local_targets(task, target))
    if task.loss == "l1":
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
        return (pred - target).abs().mean()
    if task.loss == "cosine_normals":
        if pred.shape != target.shape:
            raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
        cos = (_unit_channels(pred) * _unit_channels(target)).sum(dim=1)
        return (1.0 - cos).mean()
    raise ConfigurationError(f"unknown task loss: {task.loss!r}")


def prediction_distill_loss(
    task: TaskSpec, student_pred: torch.Tensor, teacher_pred: torch.Tensor
) -> torch.Tensor:
    """Match decoder outputs to the (detached) teacher's outputs.

    Classification tasks use KL with the teacher's softmax as the reference
    distribution; dense regression reuses the task's own distance.
    """
    _check_same_shape(student_pred, teacher_pred)
    t = teacher_pred.detach()
    if task.loss == "cross_entropy":
        log_p_t = F.log_softmax(t, dim=1)
        log_p_s = F.log_softmax(student_pred, dim=1)
        kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)
        return kl.mean()
    if task.loss == "l1":
        return (student_pred - t).abs().mean()
    if task.loss == "cosine_normals":
        cos = (_unit_channels(student_pred) * _unit_channels(t)).sum(dim=1)
        return (1.0 - cos).mean()
    raise ConfigurationError(f"unknown task loss: {task.loss!r}")


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------


def _to_tensor(a, dtype=None):
    if isinstance(a, torch.Tensor):
        return a
    t = torch.as_tensor(np.ascontiguousarray(a))
    if dtype is not None and t.is_floating_point():
        t = t.to(dtype)
    return t


def _finite_or_raise(value: torch.Tensor, term: str, task_id: str, breakdown: dict):
    if not torch.isfinite(value.detach()).all():
        raise NumericalError(
            f"non-finite {term} term for task {task_id!r}",
            trace=[breakdown],
        )


def objective_terms(
    batch: Batch,
    student,
    teachers: dict,
    cfg: DistillationConfig,
    iteration: int,
    task_weight_override: Optional[dict] = None,
):
    """Per-task weighted objective terms, kept separate for gradient surgery.

    Returns ({task id: term tensor}, breakdown). Each term is
    weight_task * task loss + weight_feature * feature distance
    + weight_prediction * prediction distance for that task alone.
    """
    images = _to_tensor(batch.images)
    feat = student.encoder(images)
    full = images.shape[0]

    terms = {}
    breakdown = {}
    for t in student.tasks:
        tid = t.id
        if tid not in batch.labels:
            raise ConfigurationError(f"batch carries no labels for task {tid!r}")
        rows = np.asarray(batch.index[tid])
        whole = rows.size == full and np.array_equal(rows, np.arange(full))
        if whole:
            feat_t, x_t = feat, images
        else:
            idx = torch.as_tensor(rows, dtype=torch.long)
            feat_t, x_t = feat[idx], images[idx]
        y_t = _to_tensor(batch.labels[tid])

        w = cfg.for_task(tid)
        lam_task = w.task if task_weight_override is None else task_weight_override[tid]
        lam_feat = effective_weight(w.feature, w.feature_anneal, iteration)
        lam_pred = effective_weight(w.prediction, w.prediction_anneal, iteration)
        if cfg.prediction_loss == "none":
            lam_pred = 0.0

        entry = {"weight_task": float(lam_task.detach()) if isinstance(lam_task, torch.Tensor) else float(lam_task), "weight_feature": lam_feat, "weight_prediction": lam_pred}

        pred_t = student.decoders[tid](feat_t)
        l_task = task_loss(t, pred_t, y_t)
        _finite_or_raise(l_task, "task", tid, breakdown)
        entry["task"] = float(l_task.detach())
        term = lam_task * l_task

        if lam_feat > 0 or lam_pred > 0:
            if tid not in teachers:
                raise ConfigurationError(
                    f"task {tid!r} has distillation weight but no teacher"
                )
            teacher = teachers[tid]
            with torch.no_grad():
                teacher_feat = teacher.encoder(x_t)
                teacher_pred = teacher.decoder(teacher_feat) if lam_pred > 0 else None
            if lam_feat > 0:
                adapted = student.adapters[tid](feat_t)
                l_feat = feature_distill_loss(
                    cfg.feature_loss, adapted, teacher_feat, cfg.bandwidth_frac
                )
                _finite_or_raise(l_feat, "feature", tid, breakdown)
                entry["feature"] = float(l_feat.detach())
                term = term + lam_feat * l_feat
            if lam_pred > 0:
                l_pred = prediction_distill_loss(t, pred_t, teacher_pred)
                _finite_or_raise(l_pred, "prediction", tid, breakdown)
                entry["prediction"] = float(l_pred.detach())
                term = term + lam_pred * l_pred

        terms[tid] = term
        breakdown[tid] = entry

    total = sum(terms.values())
    _finite_or_raise(total, "total", "*", breakdown)
    breakdown["total"] = float(total.detach()) if isinstance(total, torch.Tensor) else float(total)
    return terms, breakdown


def total_objective(
    batch: Batch,
    student,
    teachers: dict,
    cfg: DistillationConfig,
    iteration: int,
    task_weight_override: Optional[dict] = None,
):
    """Weighted sum of task, feature-distillation, and prediction terms.

    For each task t with rows `batch.index[t]`: the task loss on the student
    prediction, the feature distance between the adapted shared feature and
    teacher t's feature, and optionally the prediction distance to teacher
    t's output. Feature and prediction weights may be annealed per iteration.
    In mdl mode each task sees only its own domain's rows; the shared encoder
    still runs once on the full batch.

    `task_weight_override` (from a loss balancer) replaces the static task
    weights; distillation weights stay untouched.

    Returns (scalar loss, per-task breakdown dict).
    """
    terms, breakdown = objective_terms(
        batch, student, teachers, cfg, iteration, task_weight_override
    )
    return sum(terms.values()), breakdown
