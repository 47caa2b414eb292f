"""Two-stage training: per-task teachers, then distillation into one student.

Stage one fits a single-task network per task and freezes it behind a
checksum. Stage two trains the shared student with the combined objective;
adapters get their own optimizer (higher learning rate, cosine-annealed).
A grouped variant first distills within task groups and then distills the
group models into the final universal network.

Determinism contract: single-threaded execution, all randomness derived from
the run seed by stable key hashing, batch order a pure function of
(seed, split, epoch). Checkpoints byte-reproduce under reruns, and training
can resume from the periodic state snapshot with an identical loss trace.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .balancers import make_balancer, pcgrad_surgery
from .data import Batch, DatasetSuite, batches_per_epoch, domain_quotas, epoch_batches
from .errors import ConfigurationError, IntegrityError, NumericalError
from .losses import DistillationConfig, local_targets, objective_terms, task_loss
from .metrics import METRIC_FNS, TaskResult
from .models import (
    SingleTaskModel,
    UniversalModel,
    build_single_task_model,
    build_universal_model,
    freeze_and_checksum,
    param_checksum,
)
from .seeding import derive_seed, rng_for


@dataclass
class RunConfig:
    """Everything one training run needs besides the teachers themselves."""

    suite: DatasetSuite
    iterations: int
    seed: int
    batch_size: int = 16
    channels: int = 32
    main_lr: float = 1e-3
    main_optimizer: str = "adam"
    weight_decay: float = 0.0
    adapter_lr: float = 0.01
    adapter_weight_decay: float = 1e-4
    adapter_kind: str = "linear"
    balancer: str = "uniform"
    distill: Optional[DistillationConfig] = None
    teacher_iterations: Optional[int] = None
    anchor: Optional[str] = None
    anchor_share: float = 0.5
    out_dir: Optional[Path] = None
    eval_batch: int = 64

    def __post_init__(self):
        if self.seed is None:
            raise ConfigurationError("seed is mandatory")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.main_optimizer not in ("adam", "sgd"):
            raise ConfigurationError(f"unknown optimizer: {self.main_optimizer!r}")
        if self.distill is None:
            if self.suite.mode == "mtl":
                self.distill = DistillationConfig.dense_preset(self.suite.tasks)
            else:
                self.distill = DistillationConfig.domain_preset(
                    self.suite.tasks, anchor=self.anchor
                )
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)


@dataclass
class TaskGroup:
    id: str
    members: list


@dataclass
class TrainOutcome:
    model: torch.nn.Module
    trace: list
    out_dir: Optional[Path] = None
    extras: dict = field(default_factory=dict)


class JsonlWriter:
    """Append-only JSON-lines log; truncated at construction for idempotence."""

    def __init__(self, path: Optional[Path]):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict):
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _single_thread():
    torch.set_num_threads(1)


def _make_optimizer(kind: str, param_groups, lr: float, weight_decay: float):
    if kind == "sgd":
        return torch.optim.SGD(param_groups, lr=lr, momentum=0.9, weight_decay=weight_decay)
    return torch.optim.Adam(param_groups, lr=lr, weight_decay=weight_decay)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _predict_batched(encoder, decoder, images: np.ndarray, batch: int) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            x = torch.as_tensor(images[i : i + batch])
            outs.append(decoder(encoder(x)).numpy())
    return np.concatenate(outs)


def evaluate_model(model, suite: DatasetSuite, split: str, batch_size: int = 64) -> dict:
    """Per-task metric values on one split.

    Works for both the universal student and a single-task teacher; in mdl
    mode each task is scored on its own domain's samples with local labels.
    """
    if isinstance(model, SingleTaskModel):
        tasks = [model.task]
        decoders = {model.task.id: model.decoder}
        encoder = model.encoder
    elif isinstance(model, UniversalModel):
        tasks = model.tasks
        decoders = dict(model.decoders.items())
        encoder = model.encoder
    else:
        raise ConfigurationError(f"cannot evaluate {type(model).__name__}")

    samples = suite.splits.get(split, [])
    if not samples:
        raise ConfigurationError(f"split {split!r} is empty")

    was_training = model.training
    model.eval()
    results = {}
    for t in tasks:
        rows = [s for s in samples if t.id in s.labels]
        if not rows:
            raise ConfigurationError(f"no samples for task {t.id!r} in split {split!r}")
        images = np.stack([s.image for s in rows])
        preds = _predict_batched(encoder, decoders[t.id], images, batch_size)
        if t.loss == "cross_entropy":
            gt = np.stack([np.asarray(s.labels[t.id]) for s in rows]) % t.out_channels
            pred_labels = preds.argmax(axis=1)
            value = METRIC_FNS[t.metric](pred_labels, gt, t)
        else:
            gt = np.stack([np.asarray(s.labels[t.id]) for s in rows])
            value = METRIC_FNS[t.metric](preds, gt, t)
        results[t.id] = TaskResult(t.id, value, t.lower_is_better)
    if was_training:
        model.train()
    return results


# ---------------------------------------------------------------------------
# stage one: teachers
# ---------------------------------------------------------------------------


def _task_train_samples(suite: DatasetSuite, task_id: str):
    rows = [s for s in suite.splits["train"] if task_id in s.labels]
    if not rows:
        raise ConfigurationError(f"no training samples for task {task_id!r}")
    return rows


def train_single_teacher(cfg: RunConfig, task_id: str) -> TrainOutcome:
    """Fit, freeze, and checksum one task's network."""
    _single_thread()
    suite = cfg.suite
    task = suite.task(task_id)
    iterations = cfg.teacher_iterations or cfg.iterations
    model = build_single_task_model(task, cfg.channels, cfg.seed)
    opt = _make_optimizer(
        cfg.main_optimizer, model.parameters(), cfg.main_lr, cfg.weight_decay
    )

    rows = _task_train_samples(suite, task_id)
    if len(rows) < cfg.batch_size:
        raise ConfigurationError(
            f"task {task_id!r} has {len(rows)} training samples, "
            f"fewer than batch_size {cfg.batch_size}"
        )
    bpe = len(rows) // cfg.batch_size

    out_dir = cfg.out_dir / "teachers" / task_id if cfg.out_dir else None
    log = JsonlWriter(out_dir / "log.jsonl" if out_dir else None)

    trace = []
    model.train()
    for it in range(iterations):
        epoch, k = divmod(it, bpe)
        if k == 0:
            order = rng_for(cfg.seed, "teacher-batches", task_id, epoch).permutation(len(rows))
        picks = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        chunk = [rows[i] for i in picks]
        x = torch.as_tensor(np.stack([s.image for s in chunk]))
        if task.kind == "classification":
            y = torch.as_tensor(np.asarray([s.labels[task_id] for s in chunk], dtype=np.int64))
        else:
            y = torch.as_tensor(np.stack([np.asarray(s.labels[task_id]) for s in chunk]))

        opt.zero_grad()
        loss = task_loss(task, model(x), y)
        if not torch.isfinite(loss):
            raise NumericalError(
                f"teacher for task {task_id!r} diverged at iteration {it}",
                trace=trace[-20:],
            )
        loss.backward()
        opt.step()
        trace.append(float(loss.detach()))
        log.write({"iteration": it, "task": task_id, "term": "task", "value": trace[-1]})

    checksum = freeze_and_checksum(model)
    extras = {"checksum": checksum}
    if out_dir:
        ckpt.save_model(
            model, out_dir / "checkpoint", ckpt.describe_single_task(task, cfg.channels), cfg.seed
        )
        extras["checkpoint"] = out_dir / "checkpoint"
    return TrainOutcome(model, trace, out_dir, extras)


def train_teachers(cfg: RunConfig) -> dict:
    """One frozen, checksummed teacher per task.

    Jobs are independent; `teacher_jobs` exposes them for a parallel runner.
    Returns {task id: TrainOutcome}.
    """
    out = {}
    for tid in cfg.suite.task_ids:
        out[tid] = train_single_teacher(cfg, tid)
    if cfg.out_dir:
        path = cfg.out_dir / "teachers" / "checksums.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps({tid: o.extras["checksum"] for tid, o in out.items()},
                       indent=2, sort_keys=True)
        )
    return out


def teacher_jobs(cfg: RunConfig):
    """(task id, zero-argument callable) pairs, one per teacher.

    Each callable owns its own model; run them in separate processes for
    parallelism (torch global state is not shared safely across threads).
    """
    return [(tid, (lambda t=tid: train_single_teacher(cfg, t))) for tid in cfg.suite.task_ids]


# ---------------------------------------------------------------------------
# stage two: the universal student
# ---------------------------------------------------------------------------


def _teacher_models(teachers: dict) -> dict:
    models = {}
    for tid, t in teachers.items():
        models[tid] = t.model if isinstance(t, TrainOutcome) else t
    return models


def _flat_grads(terms, params) -> torch.Tensor:
    grads = torch.autograd.grad(terms, params, retain_graph=True, allow_unused=True)
    flat = []
    for p, g in zip(params, grads):
        flat.append(torch.zeros_like(p).flatten() if g is None else g.flatten())
    return torch.cat(flat)


def _assign_grads(params, flat: torch.Tensor):
    offset = 0
    for p in params:
        n = p.numel()
        p.grad = flat[offset : offset + n].view_as(p).to(p.dtype).clone()
        offset += n


def _save_train_state(path: Path, iteration, model, main_opt, adapter_opt, sched, balancer, best):
    state = {
        "iteration": iteration,
        "model": model.state_dict(),
        "main_opt": main_opt.state_dict(),
        "adapter_opt": adapter_opt.state_dict() if adapter_opt else None,
        "sched": sched.state_dict() if sched else None,
        "balancer": balancer.state_dict(),
        "best": best,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)


def _fit_universal(
    cfg: RunConfig,
    tasks: list,
    teachers: dict,
    build_seed: int,
    out_dir: Optional[Path],
    resume_from=None,
) -> TrainOutcome:
    _single_thread()
    suite = cfg.suite
    teacher_models = _teacher_models(teachers)

    dcfg = cfg.distill or DistillationConfig()
    if suite.mode == "mdl" and dcfg.feature_loss == "cka_rbf":
        quotas = domain_quotas(suite, cfg.batch_size, cfg.anchor, cfg.anchor_share)
        distilled = [
            t.id
            for t in tasks
            if (dcfg.for_task(t.id).feature > 0 or dcfg.for_task(t.id).feature_anneal)
            and quotas.get(t.id, 0) < 3
        ]
        if distilled:
            raise ConfigurationError(
                "kernel-alignment distillation needs >= 3 rows per domain per batch; "
                f"quotas {quotas} are too small for {distilled}, increase batch_size"
            )

    for tid, m in teacher_models.items():
        freeze_and_checksum(m)
    start_checksums = {tid: param_checksum(m) for tid, m in teacher_models.items()}

    student = build_universal_model(tasks, cfg.channels, build_seed, adapter=cfg.adapter_kind)
    balancer = make_balancer(cfg.balancer, [t.id for t in tasks])

    main_params = list(student.encoder.parameters())
    for t in tasks:
        main_params += list(student.decoders[t.id].parameters())
    adapter_params = []
    for t in tasks:
        adapter_params += list(student.adapters[t.id].parameters())

    groups = [{"params": main_params}]
    if balancer.parameters():
        groups.append({"params": balancer.parameters(), "weight_decay": 0.0})
    main_opt = _make_optimizer(cfg.main_optimizer, groups, cfg.main_lr, cfg.weight_decay)
    adapter_opt = None
    sched = None
    if adapter_params:
        adapter_opt = torch.optim.Adam(
            adapter_params, lr=cfg.adapter_lr, weight_decay=cfg.adapter_weight_decay
        )
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(
            adapter_opt, T_max=max(1, cfg.iterations)
        )

    batch_seed = derive_seed(cfg.seed, "student-batches")
    bpe = batches_per_epoch(
        suite, cfg.batch_size, "train", anchor=cfg.anchor, anchor_share=cfg.anchor_share
    )

    log = JsonlWriter(out_dir / "log.jsonl" if out_dir else None)
    state_path = out_dir / "train_state.pt" if out_dir else None

    start_it = 0
    best = {"value": None, "iteration": None}
    if resume_from is not None:
        state = torch.load(resume_from, weights_only=False)
        student.load_state_dict(state["model"])
        main_opt.load_state_dict(state["main_opt"])
        if adapter_opt and state["adapter_opt"]:
            adapter_opt.load_state_dict(state["adapter_opt"])
        if sched and state["sched"]:
            sched.load_state_dict(state["sched"])
        balancer.load_state_dict(state["balancer"])
        best = state["best"]
        start_it = state["iteration"]

    trace = []
    epoch_task_losses = {t.id: [] for t in tasks}
    last_task_losses = {t.id: 0.0 for t in tasks}
    batches = None
    batches_epoch = None

    student.train()
    for it in range(start_it, cfg.iterations):
        epoch, k = divmod(it, bpe)
        if batches_epoch != epoch:
            batches = epoch_batches(
                suite, cfg.batch_size, batch_seed, epoch, "train",
                anchor=cfg.anchor, anchor_share=cfg.anchor_share,
            )
            batches_epoch = epoch
        batch = batches[k]

        weights = balancer.task_weights(last_task_losses, epoch)
        main_opt.zero_grad()
        if adapter_opt:
            adapter_opt.zero_grad()

        terms, breakdown = objective_terms(
            batch, student, teacher_models, cfg.distill, it, task_weight_override=weights
        )
        if balancer.strategy == "pcgrad":
            flats = [_flat_grads(terms[t.id], main_params) for t in tasks]
            combined = pcgrad_surgery(flats, derive_seed(cfg.seed, "pcgrad", it))
            _assign_grads(main_params, combined)
            if adapter_params:
                total = sum(terms.values())
                a_grads = torch.autograd.grad(total, adapter_params, allow_unused=True)
                for p, g in zip(adapter_params, a_grads):
                    if g is not None:
                        p.grad = g
        else:
            total = sum(terms.values()) + balancer.extra_loss()
            total.backward()
        main_opt.step()
        if adapter_opt:
            adapter_opt.step()
            sched.step()

        for t in tasks:
            v = breakdown[t.id]["task"]
            epoch_task_losses[t.id].append(v)
            last_task_losses[t.id] = v
        trace.append(breakdown["total"])
        record = {"iteration": it, "epoch": epoch}
        for tid, entry in breakdown.items():
            if tid == "total":
                record["total"] = entry
            else:
                for term, v in entry.items():
                    record[f"{tid}/{term}"] = float(v)
        log.write(record)

        if k == bpe - 1:  # epoch boundary
            balancer.note_epoch({tid: float(np.mean(vs)) for tid, vs in epoch_task_losses.items()})
            epoch_task_losses = {t.id: [] for t in tasks}
            if out_dir:
                val = None
                if suite.splits.get("val"):
                    val_results = evaluate_model(student, suite, "val", cfg.eval_batch)
                    base_key = sorted(val_results)
                    val = float(np.mean([
                        (-1 if val_results[tid].lower_is_better else 1) * val_results[tid].value
                        for tid in base_key
                    ]))
                desc = ckpt.describe_universal(tasks, cfg.channels, cfg.adapter_kind)
                ckpt.save_model(student, out_dir / "checkpoints" / "last", desc, cfg.seed)
                if val is not None and (best["value"] is None or val > best["value"]):
                    best = {"value": val, "iteration": it}
                    ckpt.save_model(student, out_dir / "checkpoints" / "best", desc, cfg.seed)
                _save_train_state(
                    state_path, it + 1, student, main_opt, adapter_opt, sched, balancer, best
                )

    end_checksums = {tid: param_checksum(m) for tid, m in teacher_models.items()}
    if end_checksums != start_checksums:
        changed = [tid for tid in start_checksums if end_checksums[tid] != start_checksums[tid]]
        raise IntegrityError(f"teacher parameters changed during training: {changed}")

    if out_dir:
        desc = ckpt.describe_universal(tasks, cfg.channels, cfg.adapter_kind)
        ckpt.save_model(student, out_dir / "checkpoints" / "final", desc, cfg.seed)

    return TrainOutcome(
        student,
        trace,
        out_dir,
        {"teacher_checksums": start_checksums, "best": best},
    )


def verify_teachers(teachers: dict, expected: dict):
    """Compare live teacher checksums against recorded values."""
    models = _teacher_models(teachers)
    for tid, want in expected.items():
        if tid not in models:
            raise ConfigurationError(f"missing teacher for task {tid!r}")
        have = param_checksum(models[tid])
        if have != int(want):
            raise IntegrityError(
                f"teacher {tid!r} checksum {have} does not match recorded {want}"
            )


def train_universal(cfg: RunConfig, teachers: dict, resume_from=None) -> TrainOutcome:
    """Distill the frozen teachers into one shared student."""
    out_dir = cfg.out_dir / "universal" if cfg.out_dir else None
    return _fit_universal(
        cfg,
        cfg.suite.tasks,
        teachers,
        derive_seed(cfg.seed, "universal"),
        out_dir,
        resume_from=resume_from,
    )


# ---------------------------------------------------------------------------
# grouped distillation
# ---------------------------------------------------------------------------


def plan_groups(task_ids, n_groups: int, seed: int, anchor: Optional[str] = None) -> list:
    """Random partition into groups; the anchor, if given, stands alone."""
    task_ids = list(task_ids)
    if n_groups < 1:
        raise ConfigurationError(f"n_groups must be >= 1, got {n_groups}")
    if n_groups > len(task_ids):
        raise ConfigurationError(
            f"n_groups {n_groups} exceeds task count {len(task_ids)}"
        )
    groups = []
    rest = task_ids
    n_rest = n_groups
    if anchor is not None:
        if anchor not in task_ids:
            raise ConfigurationError(f"anchor {anchor!r} is not a task")
        rest = [t for t in task_ids if t != anchor]
        n_rest = n_groups - 1
        if n_rest < 1 and rest:
            raise ConfigurationError("anchor takes one group; need n_groups >= 2")
        groups.append(TaskGroup("g0", [anchor]))
    if rest:
        order = list(np.array(rest)[rng_for(seed, "groups").permutation(len(rest))])
        base, rem = divmod(len(order), n_rest)
        start = 0
        for i in range(n_rest):
            size = base + (1 if i < rem else 0)
            groups.append(TaskGroup(f"g{len(groups)}", [str(t) for t in order[start : start + size]]))
            start += size
    if any(not g.members for g in groups):
        raise ConfigurationError("every group must be non-empty")
    return groups


def train_group(cfg: RunConfig, teachers: dict, group: TaskGroup) -> TrainOutcome:
    """Distill one group's teachers into a shared model over its members."""
    tasks = [cfg.suite.task(tid) for tid in group.members]
    missing = [tid for tid in group.members if tid not in _teacher_models(teachers)]
    if missing:
        raise ConfigurationError(f"group {group.id!r} lacks teachers for {missing}")
    sub = {tid: teachers[tid] for tid in group.members}
    out_dir = cfg.out_dir / "groups" / group.id if cfg.out_dir else None
    return _fit_universal(
        cfg, tasks, sub, derive_seed(cfg.seed, "group", group.id), out_dir
    )


def group_teacher_views(outcome: TrainOutcome, tasks: list) -> dict:
    """Expose a trained group model as one frozen teacher per member task."""
    model = outcome.model
    freeze_and_checksum(model)
    views = {}
    for t in tasks:
        views[t.id] = SingleTaskModel(model.encoder, model.decoders[t.id], t)
    return views


def train_final_from_views(cfg: RunConfig, views: dict) -> TrainOutcome:
    """Final distillation round over per-task teacher views of group models.

    Runs with the same seed stream, budget, and weights as the direct
    pipeline so the two variants differ only in who the teachers are.
    """
    out_dir = cfg.out_dir / "groups_final" if cfg.out_dir else None
    return _fit_universal(
        cfg, cfg.suite.tasks, views, derive_seed(cfg.seed, "universal"), out_dir
    )


def train_grouped(cfg: RunConfig, teachers: dict, groups: list) -> TrainOutcome:
    """Two rounds of distillation: teachers -> group models -> final student.

    Group trainings are independent jobs; this runner executes them in
    sequence. The final stage reuses the same iteration budget and
    distillation weights as the direct pipeline.
    """
    ids = sorted(tid for g in groups for tid in g.members)
    if ids != sorted(cfg.suite.task_ids):
        raise ConfigurationError("groups must partition the suite's task set")
    views = {}
    group_outcomes = {}
    for g in groups:
        outcome = train_group(cfg, teachers, g)
        group_outcomes[g.id] = outcome
        views.update(group_teacher_views(outcome, [cfg.suite.task(t) for t in g.members]))
    final = train_final_from_views(cfg, views)
    final.extras["groups"] = {g.id: list(g.members) for g in groups}
    final.extras["group_outcomes"] = group_outcomes
    return final
