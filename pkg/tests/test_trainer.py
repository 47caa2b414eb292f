"""Two-stage training pipeline: teachers, student, groups, integrity."""
import json

import numpy as np
import pytest
import torch

from unidistill.data import generate_dense_suite
from unidistill.errors import ConfigurationError, IntegrityError
from unidistill.losses import DistillationConfig, TermWeights
from unidistill.models import build_single_task_model, freeze_and_checksum, param_checksum
from unidistill.trainer import (
    RunConfig,
    TaskGroup,
    evaluate_model,
    plan_groups,
    teacher_jobs,
    train_grouped,
    train_single_teacher,
    train_teachers,
    train_universal,
    verify_teachers,
)


def _cfg(suite, **kw):
    base = dict(
        suite=suite,
        iterations=4,
        seed=0,
        batch_size=3,
        channels=8,
        teacher_iterations=3,
    )
    base.update(kw)
    return RunConfig(**base)


def _vanilla_distill(suite):
    return DistillationConfig(
        weights={t.id: TermWeights(task=1.0) for t in suite.tasks}
    )


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def test_run_config_validation(dense_suite):
    with pytest.raises(ConfigurationError):
        RunConfig(suite=dense_suite, iterations=0, seed=0)
    with pytest.raises(ConfigurationError):
        RunConfig(suite=dense_suite, iterations=1, seed=None)
    with pytest.raises(ConfigurationError):
        RunConfig(suite=dense_suite, iterations=1, seed=0, main_optimizer="lbfgs")


def test_run_config_distill_presets(dense_suite, mdl_suite_small):
    dense = RunConfig(suite=dense_suite, iterations=1, seed=0)
    assert dense.distill.feature_loss == "norm_l2"
    domains = RunConfig(suite=mdl_suite_small, iterations=1, seed=0)
    assert domains.distill.feature_loss == "cka_rbf"
    assert domains.distill.prediction_loss == "kl"


# ---------------------------------------------------------------------------
# stage one
# ---------------------------------------------------------------------------


def test_train_teachers_contract(dense_suite, tmp_path):
    cfg = _cfg(dense_suite, out_dir=tmp_path)
    out = train_teachers(cfg)
    assert set(out) == set(dense_suite.task_ids)
    for tid, o in out.items():
        assert len(o.trace) == 3
        assert all(np.isfinite(v) for v in o.trace)
        assert all(not p.requires_grad for p in o.model.parameters())
        assert o.extras["checksum"] == param_checksum(o.model)
        assert (tmp_path / "teachers" / tid / "checkpoint" / "weights.bin").exists()
        assert (tmp_path / "teachers" / tid / "log.jsonl").exists()
    recorded = json.loads((tmp_path / "teachers" / "checksums.json").read_text())
    assert recorded == {tid: o.extras["checksum"] for tid, o in out.items()}


def test_teacher_determinism(dense_suite):
    a = train_teachers(_cfg(dense_suite))
    b = train_teachers(_cfg(dense_suite))
    for tid in dense_suite.task_ids:
        assert a[tid].extras["checksum"] == b[tid].extras["checksum"]
        assert a[tid].trace == b[tid].trace


def test_teacher_loss_decreases(dense_suite):
    cfg = _cfg(dense_suite, teacher_iterations=30)
    out = train_single_teacher(cfg, "seg")
    trace = out.trace
    assert np.mean(trace[-5:]) < np.mean(trace[:5])


def test_teacher_batch_size_guard(dense_suite):
    cfg = _cfg(dense_suite, batch_size=7)  # train split holds 6
    with pytest.raises(ConfigurationError):
        train_single_teacher(cfg, "seg")


def test_teacher_jobs_cover_tasks(dense_suite):
    jobs = teacher_jobs(_cfg(dense_suite))
    assert [tid for tid, _ in jobs] == list(dense_suite.task_ids)
    tid, fn = jobs[0]
    outcome = fn()
    assert outcome.extras["checksum"] == train_single_teacher(_cfg(dense_suite), tid).extras["checksum"]


# ---------------------------------------------------------------------------
# stage two
# ---------------------------------------------------------------------------


def test_zero_distill_weights_ignore_teachers(dense_suite):
    """With feature and prediction weights absent, teachers are inert."""
    trained = train_teachers(_cfg(dense_suite))
    fresh = {}
    for t in dense_suite.tasks:
        m = build_single_task_model(t, 8, seed=999)
        freeze_and_checksum(m)
        fresh[t.id] = m
    cfg_a = _cfg(dense_suite, distill=_vanilla_distill(dense_suite))
    cfg_b = _cfg(dense_suite, distill=_vanilla_distill(dense_suite))
    out_a = train_universal(cfg_a, trained)
    out_b = train_universal(cfg_b, fresh)
    assert out_a.trace == out_b.trace


def test_universal_run_reproduces_bytes(dense_suite, tmp_path):
    teachers = train_teachers(_cfg(dense_suite))
    out1 = train_universal(_cfg(dense_suite, out_dir=tmp_path / "a"), teachers)
    out2 = train_universal(_cfg(dense_suite, out_dir=tmp_path / "b"), teachers)
    assert out1.trace == out2.trace
    w1 = (tmp_path / "a" / "universal" / "checkpoints" / "final" / "weights.bin").read_bytes()
    w2 = (tmp_path / "b" / "universal" / "checkpoints" / "final" / "weights.bin").read_bytes()
    assert w1 == w2
    assert param_checksum(out1.model) == param_checksum(out2.model)


def test_universal_writes_logs_and_checkpoints(dense_suite, tmp_path):
    teachers = train_teachers(_cfg(dense_suite))
    cfg = _cfg(dense_suite, out_dir=tmp_path)
    train_universal(cfg, teachers)
    root = tmp_path / "universal"
    lines = [json.loads(l) for l in (root / "log.jsonl").read_text().splitlines()]
    assert len(lines) == cfg.iterations
    assert "total" in lines[0]
    for t in dense_suite.tasks:
        assert f"{t.id}/task" in lines[0]
    for name in ("final", "last", "best"):
        assert (root / "checkpoints" / name / "weights.bin").exists()
    assert (root / "train_state.pt").exists()


def test_resume_matches_uninterrupted(dense_suite, tmp_path):
    teachers = train_teachers(_cfg(dense_suite))
    full_cfg = _cfg(dense_suite, iterations=8, out_dir=tmp_path / "full")
    full = train_universal(full_cfg, teachers)

    # crash the same config at iteration 4; the snapshot from the epoch
    # boundary at iteration 3 stays on disk
    calls = {"n": 0}

    def crash(module, args, output):
        calls["n"] += 1
        if calls["n"] > 4:
            raise RuntimeError("simulated crash")

    handle = teachers["seg"].model.encoder.register_forward_hook(crash)
    part_cfg = _cfg(dense_suite, iterations=8, out_dir=tmp_path / "part")
    try:
        with pytest.raises(RuntimeError, match="simulated crash"):
            train_universal(part_cfg, teachers)
    finally:
        handle.remove()

    resumed = train_universal(
        part_cfg, teachers, resume_from=tmp_path / "part" / "universal" / "train_state.pt"
    )
    assert len(resumed.trace) == 4
    np.testing.assert_allclose(resumed.trace, full.trace[4:], atol=1e-6)
    w_full = (tmp_path / "full" / "universal" / "checkpoints" / "final" / "weights.bin").read_bytes()
    w_res = (tmp_path / "part" / "universal" / "checkpoints" / "final" / "weights.bin").read_bytes()
    assert w_full == w_res


# ---------------------------------------------------------------------------
# teacher integrity
# ---------------------------------------------------------------------------


def test_verify_teachers(dense_suite):
    teachers = train_teachers(_cfg(dense_suite))
    expected = {tid: o.extras["checksum"] for tid, o in teachers.items()}
    verify_teachers(teachers, expected)
    with pytest.raises(ConfigurationError):
        verify_teachers(teachers, {"ghost": 1})
    tampered = dict(expected)
    tampered["seg"] = expected["seg"] + 1
    with pytest.raises(IntegrityError):
        verify_teachers(teachers, tampered)


def test_teacher_mutation_during_training_detected(dense_suite):
    teachers = train_teachers(_cfg(dense_suite))
    victim = teachers["seg"].model
    fired = {"done": False}

    def corrupt(module, args, output):
        if not fired["done"]:
            fired["done"] = True
            with torch.no_grad():
                next(module.parameters()).add_(1.0)

    handle = victim.encoder.register_forward_hook(corrupt)
    try:
        with pytest.raises(IntegrityError):
            train_universal(_cfg(dense_suite), teachers)
    finally:
        handle.remove()
    assert fired["done"]


def test_cka_quota_guard(mdl_suite_small):
    # two training domains at batch 4 leave 2 rows each, below the kernel floor
    fresh = {}
    for t in mdl_suite_small.tasks:
        m = build_single_task_model(t, 8, seed=1)
        freeze_and_checksum(m)
        fresh[t.id] = m
    cfg = _cfg(mdl_suite_small, batch_size=4)
    with pytest.raises(ConfigurationError, match="increase batch_size"):
        train_universal(cfg, fresh)


# ---------------------------------------------------------------------------
# grouping
# ---------------------------------------------------------------------------


def test_plan_groups_partitions():
    ids = ["a", "b", "c", "d", "e"]
    groups = plan_groups(ids, 2, seed=0)
    members = sorted(t for g in groups for t in g.members)
    assert members == sorted(ids)
    sizes = sorted(len(g.members) for g in groups)
    assert sizes == [2, 3]
    again = plan_groups(ids, 2, seed=0)
    assert [g.members for g in again] == [g.members for g in groups]
    assert [g.id for g in groups] == ["g0", "g1"]


def test_plan_groups_anchor_stands_alone():
    groups = plan_groups(["a", "b", "c"], 2, seed=3, anchor="b")
    assert groups[0].members == ["b"]
    rest = sorted(t for g in groups[1:] for t in g.members)
    assert rest == ["a", "c"]


def test_plan_groups_validation():
    with pytest.raises(ConfigurationError):
        plan_groups(["a"], 0, seed=0)
    with pytest.raises(ConfigurationError):
        plan_groups(["a"], 2, seed=0)
    with pytest.raises(ConfigurationError):
        plan_groups(["a", "b"], 2, seed=0, anchor="z")
    with pytest.raises(ConfigurationError):
        plan_groups(["a", "b"], 1, seed=0, anchor="a")


def test_train_grouped_contract(dense_suite, tmp_path):
    cfg = _cfg(dense_suite, out_dir=tmp_path)
    teachers = train_teachers(cfg)
    groups = plan_groups(dense_suite.task_ids, 2, seed=5)
    final = train_grouped(cfg, teachers, groups)
    assert final.extras["groups"] == {g.id: list(g.members) for g in groups}
    assert set(final.extras["group_outcomes"]) == {g.id for g in groups}
    for g in groups:
        assert (tmp_path / "groups" / g.id / "checkpoints" / "final" / "weights.bin").exists()
    assert (tmp_path / "groups_final" / "checkpoints" / "final" / "weights.bin").exists()
    # the final student serves every task
    results = evaluate_model(final.model, dense_suite, "test")
    assert set(results) == set(dense_suite.task_ids)


def test_train_grouped_requires_partition(dense_suite):
    teachers = train_teachers(_cfg(dense_suite))
    bad = [TaskGroup("g0", ["seg"]), TaskGroup("g1", ["depth"])]  # normals missing
    with pytest.raises(ConfigurationError):
        train_grouped(_cfg(dense_suite), teachers, bad)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def test_evaluate_model_contract(dense_suite):
    teachers = train_teachers(_cfg(dense_suite))
    single = teachers["seg"].model
    res = evaluate_model(single, dense_suite, "test")
    assert set(res) == {"seg"}
    assert np.isfinite(res["seg"].value)
    assert res["seg"].lower_is_better == dense_suite.task("seg").lower_is_better

    out = train_universal(_cfg(dense_suite), teachers)
    res = evaluate_model(out.model, dense_suite, "test")
    assert set(res) == set(dense_suite.task_ids)
    for tid, r in res.items():
        assert np.isfinite(r.value)

    with pytest.raises(ConfigurationError):
        evaluate_model(out.model, dense_suite, "nope")


def test_evaluate_model_restores_training_mode(dense_suite):
    teachers = train_teachers(_cfg(dense_suite))
    out = train_universal(_cfg(dense_suite), teachers)
    out.model.train()
    evaluate_model(out.model, dense_suite, "val")
    assert out.model.training
    out.model.eval()
    evaluate_model(out.model, dense_suite, "val")
    assert not out.model.training
