import json

import numpy as np
import pytest

from unidistill.data import (
    Batch,
    DENSE_SEG_CLASSES,
    DatasetSuite,
    LabeledSample,
    TaskSpec,
    batches_per_epoch,
    domain_quotas,
    epoch_batches,
    export_suite,
    generate_dense_suite,
    generate_domain_suite,
    load_suite,
    make_batches,
    suite_digest,
    unseen_domains,
)
from unidistill.errors import ConfigurationError, IntegrityError, IterationError


# ---------------------------------------------------------------------------
# dense suite
# ---------------------------------------------------------------------------


def test_dense_counts_and_tasks(dense_suite):
    sizes = {k: len(v) for k, v in dense_suite.splits.items()}
    assert sum(sizes.values()) == 8
    assert sizes["val"] >= 1 and sizes["test"] >= 1
    assert dense_suite.mode == "mtl"
    assert [t.id for t in dense_suite.tasks] == ["seg", "depth", "normals"]
    seg = dense_suite.task("seg")
    assert seg.out_channels == DENSE_SEG_CLASSES
    assert dense_suite.task("normals").out_channels == 3


def test_dense_sample_shapes_and_ranges(dense_suite):
    s = dense_suite.splits["train"][0]
    assert s.image.shape == (3, 32, 32)
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.labels["seg"].shape == (32, 32)
    assert s.labels["seg"].min() >= 0 and s.labels["seg"].max() < DENSE_SEG_CLASSES
    assert s.labels["depth"].shape == (1, 32, 32)
    assert s.labels["normals"].shape == (3, 32, 32)
    # mtl: every sample carries every task's label
    for split in ("train", "val", "test"):
        for samp in dense_suite.splits[split]:
            assert set(samp.labels) == {"seg", "depth", "normals"}


def test_dense_determinism(dense_suite):
    again = generate_dense_suite(7, 8, 32)
    assert suite_digest(again) == suite_digest(dense_suite)
    other = generate_dense_suite(8, 8, 32)
    assert suite_digest(other) != suite_digest(dense_suite)


def test_dense_normals_unit_norm(dense_suite):
    for split in ("train", "val", "test"):
        for s in dense_suite.splits[split]:
            norms = np.linalg.norm(s.labels["normals"].astype(np.float64), axis=0)
            assert np.abs(norms - 1.0).max() <= 1e-6


def test_dense_boundaries_are_depth_jumps():
    """Label boundaries must coincide with generator depth discontinuities.

    The generator stacks shapes at bases spaced 0.16 apart over a background
    below 0.27, so any cross-label neighbor pair jumps by at least ~0.08
    while in-region neighbor steps stay below ~0.04.
    """
    suite = generate_dense_suite(123, 12, 32)
    samples = [s for split in ("train", "val", "test") for s in suite.splits[split]]
    assert len(samples) >= 10
    checked = 0
    for s in samples:
        seg = s.labels["seg"]
        depth = s.labels["depth"][0].astype(np.float64)
        for axis in (0, 1):
            lab_a = np.take(seg, range(seg.shape[axis] - 1), axis=axis)
            lab_b = np.take(seg, range(1, seg.shape[axis]), axis=axis)
            d_a = np.take(depth, range(depth.shape[axis] - 1), axis=axis)
            d_b = np.take(depth, range(1, depth.shape[axis]), axis=axis)
            jump = np.abs(d_a - d_b)
            boundary = lab_a != lab_b
            if boundary.any():
                assert jump[boundary].min() > 0.04
                checked += 1
            # the converse can fail where same-class shapes stack, so only
            # check that typical in-region steps sit well under the margin
            if (~boundary).any():
                assert np.median(jump[~boundary]) < 0.04
    assert checked >= 10


@pytest.mark.parametrize("hw", [8, 130, 0])
def test_dense_rejects_bad_hw(hw):
    with pytest.raises(ConfigurationError):
        generate_dense_suite(0, 4, hw)


def test_dense_rejects_empty():
    with pytest.raises(ConfigurationError):
        generate_dense_suite(0, 0, 32)


# ---------------------------------------------------------------------------
# domain suite
# ---------------------------------------------------------------------------


def test_domain_counts(mdl_suite):
    # 4 training domains get TaskSpecs; the 5th exists only in meta_test_classes
    assert mdl_suite.mode == "mdl"
    assert [t.id for t in mdl_suite.tasks] == ["d0", "d1", "d2", "d3"]
    assert unseen_domains(mdl_suite) == ["d4"]
    meta_ids = {tid for s in mdl_suite.splits["meta_test_classes"] for tid in s.labels}
    assert "d4" in meta_ids


def test_domain_label_disjointness(mdl_suite):
    by_domain = {}
    for split in mdl_suite.splits.values():
        for s in split:
            (tid, y), = s.labels.items()  # exactly one label per mdl sample
            by_domain.setdefault(tid, set()).add(int(y))
    domains = sorted(by_domain)
    for i, a in enumerate(domains):
        for b in domains[i + 1 :]:
            assert not (by_domain[a] & by_domain[b])


def test_domain_meta_classes_disjoint_from_train(mdl_suite):
    train_classes = {}
    for s in mdl_suite.splits["train"]:
        (tid, y), = s.labels.items()
        train_classes.setdefault(tid, set()).add(int(y))
    meta_classes = {}
    for s in mdl_suite.splits["meta_test_classes"]:
        (tid, y), = s.labels.items()
        meta_classes.setdefault(tid, set()).add(int(y))
    for tid, metas in meta_classes.items():
        assert not (metas & train_classes.get(tid, set()))
    # every training domain holds out at least two classes
    for tid in ("d0", "d1", "d2", "d3"):
        assert len(meta_classes[tid]) >= 2


def test_domain_determinism(mdl_suite):
    again = generate_domain_suite(1, 4, 10, 20, hw=32)
    assert suite_digest(again) == suite_digest(mdl_suite)


def test_domain_validation():
    with pytest.raises(ConfigurationError):
        generate_domain_suite(0, 1, 10, 5)
    with pytest.raises(ConfigurationError):
        generate_domain_suite(0, 2, 3, 5)
    with pytest.raises(ConfigurationError):
        generate_domain_suite(0, 2, 4, 0)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def test_mtl_batches_carry_all_labels(dense_suite):
    stream = make_batches(dense_suite, 4, seed=0)
    for _ in range(3):
        b = next(stream)
        assert b.images.shape == (4, 3, 32, 32)
        assert set(b.labels) == {"seg", "depth", "normals"}
        for tid in b.labels:
            assert np.array_equal(b.index[tid], np.arange(4))


def test_mdl_equal_quotas(mdl_suite):
    quotas = domain_quotas(mdl_suite, 8)
    assert quotas == {"d0": 2, "d1": 2, "d2": 2, "d3": 2}
    b = next(make_batches(mdl_suite, 8, seed=0))
    assert b.images.shape[0] == 8
    for tid, rows in b.index.items():
        assert rows.size == 2
        # each row's label really belongs to that domain
        lo = int(tid[1:]) * 10
        assert all(lo <= int(y) < lo + 10 for y in b.labels[tid])


def test_mdl_anchor_share(mdl_suite):
    # batch 8, anchor takes half, remainder split among the other 3
    quotas = domain_quotas(mdl_suite, 8, anchor="d1", anchor_share=0.5)
    assert quotas["d1"] == 4
    assert sum(quotas.values()) == 8
    assert sorted(quotas[t] for t in ("d0", "d2", "d3")) == [1, 1, 2]


def test_mdl_batch_too_small(mdl_suite):
    with pytest.raises(ConfigurationError):
        domain_quotas(mdl_suite, 3)


def test_epoch_batches_are_stateless(dense_suite):
    a = epoch_batches(dense_suite, 2, seed=5, epoch=3)
    b = epoch_batches(dense_suite, 2, seed=5, epoch=3)
    assert len(a) == batches_per_epoch(dense_suite, 2)
    for x, y in zip(a, b):
        assert np.array_equal(x.images, y.images)
    c = epoch_batches(dense_suite, 2, seed=5, epoch=4)
    assert any(
        not np.array_equal(x.images, y.images) for x, y in zip(a, c)
    )


def test_empty_split_raises(dense_suite):
    empty = DatasetSuite(
        "mtl", list(dense_suite.tasks), {"train": [], "val": [], "test": []}, 0
    )
    with pytest.raises(IterationError):
        next(make_batches(empty, 2, seed=0))


def test_batch_size_exceeds_split(dense_suite):
    with pytest.raises(IterationError):
        epoch_batches(dense_suite, 100, seed=0, epoch=0)


# ---------------------------------------------------------------------------
# export / load
# ---------------------------------------------------------------------------


def test_export_load_roundtrip(dense_suite, tmp_path):
    out = export_suite(dense_suite, tmp_path / "suite")
    assert (out / "manifest.json").exists()
    loaded = load_suite(out)
    assert suite_digest(loaded) == suite_digest(dense_suite)
    s0 = dense_suite.splits["train"][0]
    l0 = loaded.splits["train"][0]
    assert np.array_equal(s0.image, l0.image)
    assert np.array_equal(s0.labels["seg"], l0.labels["seg"])


def test_export_load_roundtrip_mdl(mdl_suite_small, tmp_path):
    out = export_suite(mdl_suite_small, tmp_path / "suite")
    loaded = load_suite(out)
    assert suite_digest(loaded) == suite_digest(mdl_suite_small)
    assert loaded.meta["withheld_domain"] == "d2"


def test_export_is_byte_stable(dense_suite, tmp_path):
    a = export_suite(dense_suite, tmp_path / "a")
    b = export_suite(dense_suite, tmp_path / "b")
    for name in ("manifest.json", "images.bin", "labels_seg.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_load_rejects_corruption(dense_suite, tmp_path):
    out = export_suite(dense_suite, tmp_path / "suite")
    with pytest.raises(IntegrityError):
        load_suite(tmp_path / "missing")

    blob = out / "images.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(IntegrityError):
        load_suite(out)

    (out / "images.bin").unlink()
    with pytest.raises(IntegrityError):
        load_suite(out)

    manifest = json.loads((out / "manifest.json").read_text())
    manifest["format_version"] = 99
    (out / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(IntegrityError):
        load_suite(out)

    (out / "manifest.json").write_text("{not json")
    with pytest.raises(IntegrityError):
        load_suite(out)


# ---------------------------------------------------------------------------
# task spec validation
# ---------------------------------------------------------------------------


def test_taskspec_invariants():
    with pytest.raises(ConfigurationError):
        TaskSpec("a", "classification", 4, 2, 2, "cross_entropy", "accuracy", False)
    with pytest.raises(ConfigurationError):
        TaskSpec("a", "dense", 4, 8, 8, "cosine_normals", "mean_angle_err", True)
    with pytest.raises(ConfigurationError):
        TaskSpec("a", "blob", 4, 8, 8, "l1", "abs_err", True)
    t = TaskSpec("n", "dense", 3, 8, 8, "cosine_normals", "mean_angle_err", True)
    assert TaskSpec.from_dict(t.to_dict()) == t


def test_duplicate_task_ids_rejected():
    t = TaskSpec("a", "classification", 4, 1, 1, "cross_entropy", "accuracy", False)
    with pytest.raises(ConfigurationError):
        DatasetSuite("mdl", [t, t], {"train": [], "val": [], "test": []}, 0)
