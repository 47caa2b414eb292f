"""Task metrics, the aggregate multi-task score, and table rendering."""
import csv
from types import SimpleNamespace

import numpy as np
import pytest

from unidistill.errors import ConfigurationError, NumericalError
from unidistill.metrics import (
    METRIC_FNS,
    TaskResult,
    abs_err,
    accuracy,
    delta_mtl,
    format_table,
    mean_angle_err,
    miou,
    write_table,
)


# ---------------------------------------------------------------------------
# per-task metrics
# ---------------------------------------------------------------------------


def test_miou_hand_example():
    # class 0: inter 1, union 2; class 1: inter 2, union 3
    gt = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    assert miou(pred, gt, 2) == pytest.approx((1 / 2 + 2 / 3) / 2, abs=1e-12)


def test_miou_perfect_and_skipped_classes():
    gt = np.array([[0, 1], [1, 0]])
    assert miou(gt, gt, 2) == pytest.approx(1.0)
    # classes 2..4 appear nowhere, so the mean runs over two classes only
    assert miou(gt, gt, 5) == pytest.approx(1.0)


def test_miou_validation():
    with pytest.raises(ConfigurationError):
        miou(np.zeros(3, dtype=int), np.zeros(4, dtype=int), 2)
    with pytest.raises(ConfigurationError):
        miou(np.array([0, 2]), np.array([0, 1]), 2)  # label out of range
    with pytest.raises(ConfigurationError):
        miou(np.array([-1, 0]), np.array([0, 1]), 2)
    with pytest.raises(ConfigurationError):
        miou(np.zeros(0, dtype=int), np.zeros(0, dtype=int), 2)  # no unions


def test_abs_err():
    assert abs_err([1.0, 3.0], [2.0, 5.0]) == pytest.approx(1.5)
    assert abs_err([1.0], [1.0]) == 0.0
    with pytest.raises(ConfigurationError):
        abs_err(np.zeros(2), np.zeros(3))


def test_mean_angle_err_landmarks():
    gt = np.zeros((1, 3, 2, 2))
    gt[:, 0] = 1.0  # all vectors along x
    assert mean_angle_err(gt, gt) == pytest.approx(0.0, abs=1e-9)
    assert mean_angle_err(-gt, gt) == pytest.approx(180.0, abs=1e-9)
    ortho = np.zeros_like(gt)
    ortho[:, 1] = 1.0
    assert mean_angle_err(ortho, gt) == pytest.approx(90.0, abs=1e-9)


def test_mean_angle_err_validation():
    gt = np.ones((1, 3, 2, 2))
    with pytest.raises(NumericalError):
        mean_angle_err(np.zeros_like(gt), gt)
    with pytest.raises(ConfigurationError):
        mean_angle_err(np.ones((1, 2, 2, 2)), np.ones((1, 2, 2, 2)))
    with pytest.raises(ConfigurationError):
        mean_angle_err(gt, np.ones((1, 3, 2, 3)))


def test_accuracy():
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == pytest.approx(0.75)
    with pytest.raises(ConfigurationError):
        accuracy(np.zeros(0), np.zeros(0))
    with pytest.raises(ConfigurationError):
        accuracy(np.zeros(2), np.zeros(3))


def test_metric_fn_registry_dispatch():
    assert set(METRIC_FNS) == {"miou", "abs_err", "mean_angle_err", "accuracy"}
    task = SimpleNamespace(out_channels=2)
    gt = np.array([0, 1, 1, 0])
    assert METRIC_FNS["miou"](gt, gt, task) == pytest.approx(1.0)
    assert METRIC_FNS["accuracy"](gt, gt, task) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# aggregate score
# ---------------------------------------------------------------------------


def _res(tid, value, lower):
    return TaskResult(task_id=tid, value=value, lower_is_better=lower)


STL = [_res("seg", 40.54, False), _res("depth", 0.6276, True), _res("norm", 24.28, True)]


def test_delta_mtl_three_task_fixture():
    # mixed-direction fixture with a hand-checked aggregate
    ours = [_res("seg", 45.52, False), _res("depth", 0.4912, True), _res("norm", 24.57, True)]
    uniform = [_res("seg", 40.22, False), _res("depth", 0.5196, True), _res("norm", 29.09, True)]
    got_ours = delta_mtl(ours, STL)
    got_uniform = delta_mtl(uniform, STL)
    assert got_ours == pytest.approx(10.9411, abs=1e-3)
    assert got_uniform == pytest.approx(-1.1305, abs=1e-3)
    # quoted two-decimal values round-trip within rounding slack
    assert abs(got_ours - 10.95) <= 0.02
    assert abs(got_uniform - (-1.13)) <= 0.02


def test_delta_mtl_signs_and_scale():
    base = [_res("a", 10.0, False)]
    assert delta_mtl([_res("a", 11.0, False)], base) == pytest.approx(10.0)
    assert delta_mtl([_res("a", 9.0, False)], base) == pytest.approx(-10.0)
    base_low = [_res("a", 10.0, True)]
    assert delta_mtl([_res("a", 9.0, True)], base_low) == pytest.approx(10.0)
    assert delta_mtl([_res("a", 11.0, True)], base_low) == pytest.approx(-10.0)
    # baseline against itself is exactly zero
    assert delta_mtl(STL, STL) == 0.0


def test_delta_mtl_averages_over_tasks():
    base = [_res("a", 10.0, False), _res("b", 10.0, False)]
    res = [_res("a", 12.0, False), _res("b", 10.0, False)]
    assert delta_mtl(res, base) == pytest.approx(10.0)


def test_delta_mtl_accepts_dicts():
    base = {"a": _res("a", 10.0, False)}
    res = {"a": _res("a", 11.0, False)}
    assert delta_mtl(res, base) == pytest.approx(10.0)


def test_delta_mtl_validation():
    base = [_res("a", 10.0, False)]
    with pytest.raises(ConfigurationError):
        delta_mtl([_res("b", 1.0, False)], base)  # task sets differ
    with pytest.raises(ConfigurationError):
        delta_mtl([_res("a", 1.0, True)], base)  # direction mismatch
    with pytest.raises(ConfigurationError):
        delta_mtl([], [])
    with pytest.raises(ZeroDivisionError):
        delta_mtl([_res("a", 1.0, False)], [_res("a", 0.0, False)])


def test_task_result_rejects_non_finite():
    with pytest.raises(ConfigurationError):
        _res("a", float("nan"), False)
    with pytest.raises(ConfigurationError):
        _res("a", float("inf"), True)


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def test_format_table_layout():
    text = format_table(["name", "score"], [["seg", 0.5], ["depth", 12]])
    lines = text.splitlines()
    assert lines[0].split() == ["name", "score"]
    assert set(lines[1]) <= {"-", " "}
    assert "0.5000" in lines[2]  # floats get 4 decimals
    assert lines[3].split() == ["depth", "12"]  # ints stay ints
    # all rows align to the same width
    assert len({len(l) for l in lines[:2]}) == 1


def test_write_table_outputs(tmp_path):
    csv_path = tmp_path / "t.csv"
    txt_path = tmp_path / "t.txt"
    text = write_table(["a", "b"], [[1, 2.5]], csv_path=csv_path, text_path=txt_path)
    assert txt_path.read_text() == text
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows == [["a", "b"], ["1", "2.5"]]
