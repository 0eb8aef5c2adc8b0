import csv
import json
import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import pytest
from hypothesis import given, settings

from contextgate import _netpbm
from contextgate.attention import AttentionArtifacts, AttentionKind
from contextgate.errors import ConfigurationError, ContractError, DimensionError
from contextgate.evaluation import (
    COMPARISON_COLUMNS,
    ComparisonRow,
    ComparisonTable,
    HeatmapChannel,
    compare_attention_variants,
    compute_metrics,
    export_heatmap,
    write_heatmap,
)
from contextgate.tensor import Tensor
from contextgate.training import TrainConfig
from tests import random_dataset, tiny_model_config
from tests.strategies import feature_maps, prediction_sets


def scores_to_probs(labels: List[int], num_classes: int) -> np.ndarray:
    """Probability rows whose argmax is ``labels``."""
    probs = np.full((len(labels), num_classes), 0.1 / (num_classes - 1))
    probs[np.arange(len(labels)), labels] = 0.9
    return probs


def confusion_to_arrays(confusion: List[List[int]]):
    y_true, y_pred = [], []
    for t, row in enumerate(confusion):
        for p, count in enumerate(row):
            y_true += [t] * count
            y_pred += [p] * count
    return np.array(y_true), scores_to_probs(y_pred, len(confusion))


def brute_auc(positive: np.ndarray, scores: np.ndarray) -> Optional[float]:
    pos, neg = scores[positive], scores[~positive]
    if len(pos) == 0 or len(neg) == 0:
        return None
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def assert_close(actual: Optional[float], expected: Optional[float]):
    if expected is None:
        assert actual is None
    else:
        assert actual == pytest.approx(expected, abs=1e-9)


# Metrics ------------------------------------------------------------------------------------


def test_confusion_example():
    y_true, y_prob = confusion_to_arrays([[20, 5], [10, 15]])
    report = compute_metrics(y_true, y_prob)
    np.testing.assert_array_equal(report.confusion, [[20, 5], [10, 15]])
    assert report.accuracy == pytest.approx(0.70)
    # p_o = 0.7, p_e = (25 * 30 + 25 * 20) / 50**2 = 0.5
    assert report.kappa == pytest.approx(0.4, abs=1e-9)
    assert report.per_class[0].precision == pytest.approx(20 / 30)
    assert report.per_class[0].recall == pytest.approx(20 / 25)
    assert report.per_class[0].accuracy == report.per_class[0].recall
    assert report.per_class[1].support == 25


def test_auc_example():
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    report = compute_metrics(np.array([0, 0, 1, 1]), np.stack([1 - scores, scores], axis=1))
    assert report.per_class[1].auc == 0.75
    assert report.per_class[0].auc == 0.75


@pytest.mark.parametrize("num_classes", [2, 3, 5])
def test_perfect_predictions(num_classes):
    labels = list(range(num_classes)) * 3
    report = compute_metrics(np.array(labels), scores_to_probs(labels, num_classes))
    assert report.accuracy == 1.0
    assert report.kappa == 1.0
    assert all(row.f1 == 1.0 and row.auc == 1.0 for row in report.per_class)
    assert report.macro.f1 == 1.0


def test_kappa_is_zero_for_independent_predictions():
    # predictions split 50/50 within each true class
    y_true, y_prob = confusion_to_arrays([[10, 10], [5, 5]])
    assert compute_metrics(y_true, y_prob).kappa == pytest.approx(0.0, abs=1e-12)


def test_single_class_everywhere():
    report = compute_metrics(np.zeros(4, dtype=int), scores_to_probs([0, 0, 0, 0], 2))
    np.testing.assert_array_equal(report.confusion, [[4, 0], [0, 0]])
    assert report.accuracy == 1.0
    # diagonal, but class 1 never appears
    assert report.kappa == 0.0
    assert report.per_class[0].auc is None
    assert report.per_class[1] == (None, None, None, None, None, 0)


def test_absent_class_is_excluded_from_macro(caplog):
    labels = [0, 1, 0, 1]
    with caplog.at_level(logging.WARNING, logger="contextgate.evaluation"):
        report = compute_metrics(np.array(labels), scores_to_probs(labels, 3))
    assert report.per_class[2].recall is None
    assert report.macro.recall == 1.0
    assert "Class 2 is absent" in caplog.text


def test_absent_but_predicted_class_keeps_precision():
    y_true = np.array([0, 0, 1, 1])
    report = compute_metrics(y_true, scores_to_probs([0, 2, 1, 1], 3))
    assert report.per_class[2] == (None, 0.0, None, None, None, 0)
    assert report.macro.precision == pytest.approx(2.0 / 3.0)
    assert report.macro.recall == pytest.approx(0.75)


def test_auc_is_invariant_to_monotone_transforms():
    rng = np.random.default_rng(0)
    labels = np.arange(20) % 2
    scores = rng.uniform(0.01, 0.99, size=20)
    first = compute_metrics(labels, np.stack([1 - scores, scores], axis=1))
    squared = scores**2
    second = compute_metrics(labels, np.stack([1 - squared, squared], axis=1))
    assert first.per_class[1].auc == second.per_class[1].auc


@given(prediction_sets())
@settings(max_examples=50, deadline=None)
def test_metrics_match_brute_force(case):
    y_true, y_prob = case
    num_classes = y_prob.shape[1]
    report = compute_metrics(y_true, y_prob)
    y_pred = np.argmax(y_prob, axis=1)
    n = len(y_true)

    confusion = np.zeros((num_classes, num_classes), dtype=int)
    for t, p in zip(y_true, y_pred):
        confusion[t, p] += 1
    np.testing.assert_array_equal(report.confusion, confusion)
    assert_close(report.accuracy, np.trace(confusion) / n)

    for c in range(num_classes):
        row = report.per_class[c]
        tp = confusion[c, c]
        support = confusion[c].sum()
        predicted = confusion[:, c].sum()
        assert row.support == support
        if support == 0:
            expected_precision = 0.0 if predicted else None
            assert row == (None, expected_precision, None, None, None, 0)
            continue
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        assert_close(row.precision, precision)
        assert_close(row.recall, recall)
        assert_close(row.accuracy, recall)
        assert_close(row.f1, f1)
        assert_close(row.auc, brute_auc(y_true == c, y_prob[:, c]))

    defined = [row.recall for row in report.per_class if row.recall is not None]
    assert_close(report.macro.recall, sum(defined) / len(defined))
    f1s = [row.f1 for row in report.per_class if row.support]
    assert_close(report.macro.f1, sum(f1s) / len(f1s))
    weighted = sum(row.recall * row.support for row in report.per_class if row.support) / n
    assert_close(report.weighted.recall, weighted)

    p_o = np.trace(confusion) / n
    p_e = float((confusion.sum(axis=1) * confusion.sum(axis=0)).sum()) / n**2
    kappa = 0.0 if p_e == 1.0 else (p_o - p_e) / (1 - p_e)
    assert_close(report.kappa, kappa)


def test_compute_metrics_validates_inputs():
    with pytest.raises(DimensionError):
        compute_metrics(np.array([0, 1]), np.full((3, 2), 0.5))
    with pytest.raises(ConfigurationError):
        compute_metrics(np.zeros(0, dtype=int), np.zeros((0, 2)))
    with pytest.raises(ContractError, match="summing to 1"):
        compute_metrics(np.array([0]), np.array([[0.2, 0.2]]))
    with pytest.raises(ContractError, match="labels"):
        compute_metrics(np.array([2]), np.array([[0.5, 0.5]]))


def test_report_table_and_json():
    y_true, y_prob = confusion_to_arrays([[20, 5], [10, 15]])
    report = compute_metrics(y_true, y_prob)
    table = report.format_table(["Normal", "DR"])
    lines = table.splitlines()
    assert lines[0].split() == ["Class", "Acc", "Prec", "Rec", "F1", "AUC", "#Test"]
    assert lines[1].split()[0] == "Normal"
    assert lines[1].split()[-1] == "25"
    assert lines[3].startswith("Macro")
    assert lines[4].startswith("Weighted")
    assert lines[-1] == "Accuracy 70.00  Kappa 40.00"
    with pytest.raises(ContractError):
        report.format_table(["only one"])
    assert json.loads(report.to_json())["kappa"] == pytest.approx(0.4)
    assert report.to_dict()["confusion"] == [[20, 5], [10, 15]]


# Heatmaps -----------------------------------------------------------------------------------


def artifacts_with(gate=None, spatial_map=None) -> AttentionArtifacts:
    return AttentionArtifacts(
        AttentionKind.GCG,
        output=Tensor(np.zeros((2, 2, 1))),
        gate=None if gate is None else Tensor(np.asarray(gate, dtype=np.float64)),
        spatial_map=None if spatial_map is None else Tensor(np.asarray(spatial_map, dtype=float)),
    )


def test_constant_map_is_mid_gray():
    heatmap = export_heatmap(artifacts_with(gate=np.full((2, 2, 1), 0.3)), (8, 6))
    assert heatmap.gray.shape == (8, 6)
    assert heatmap.gray.dtype == np.uint8
    assert np.all(heatmap.gray == 128)
    assert heatmap.overlay is None


def test_upsampling_keeps_block_geometry():
    spatial = np.array([[0.0, 1.0], [0.5, 0.25]])
    heatmap = export_heatmap(artifacts_with(spatial_map=spatial), (4, 4), "spatial_map")
    expected = np.array([[0, 255], [128, 64]], dtype=np.uint8)
    np.testing.assert_array_equal(heatmap.gray, np.kron(expected, np.ones((2, 2), dtype=np.uint8)))
    assert heatmap.gray.min() == 0
    assert heatmap.gray.max() == 255


@given(feature_maps(max_side=5, max_depth=1))
@settings(max_examples=40, deadline=None)
def test_normalized_map_spans_full_range(gate):
    heatmap = export_heatmap(artifacts_with(gate=gate), (10, 10))
    if np.ptp(gate) > 0.0:
        assert heatmap.gray.min() == 0
        assert heatmap.gray.max() == 255
    else:
        assert np.all(heatmap.gray == 128)


def test_per_channel_gate_is_averaged():
    gate = np.zeros((2, 2, 4))
    gate[0, 0] = [1.0, 1.0, 0.0, 0.0]
    gate[1, 1] = [1.0, 1.0, 1.0, 1.0]
    heatmap = export_heatmap(artifacts_with(gate=gate), (2, 2))
    np.testing.assert_array_equal(heatmap.gray, [[128, 0], [0, 255]])


def test_overlay_colormap():
    gate = np.array([[[0.0], [1.0]], [[0.0], [1.0]]])
    image = np.ones((2, 2, 3))
    heatmap = export_heatmap(artifacts_with(gate=gate), (2, 2), HeatmapChannel.GATE, image)
    np.testing.assert_array_equal(heatmap.overlay[0, 0], [255, 255, 255])
    np.testing.assert_array_equal(heatmap.overlay[0, 1], [128, 128, 191])


def test_heatmap_errors():
    gated = artifacts_with(gate=np.ones((2, 2, 1)))
    with pytest.raises(ConfigurationError, match="target size"):
        export_heatmap(gated, (0, 4))
    with pytest.raises(ConfigurationError, match="spatial_map"):
        export_heatmap(gated, (4, 4), "spatial_map")
    with pytest.raises(DimensionError):
        export_heatmap(artifacts_with(gate=np.ones((3, 2, 2, 1))), (4, 4))
    with pytest.raises(ValueError):
        export_heatmap(gated, (4, 4), "context")


def test_write_heatmap(tmp_path: Path):
    gate = np.array([[[0.0], [1.0]], [[0.5], [0.25]]])
    heatmap = export_heatmap(artifacts_with(gate=gate), (4, 4), image=np.zeros((4, 4, 3)))
    written = write_heatmap(heatmap, tmp_path / "maps", "img_0001", "gate")
    assert [p.name for p in written] == ["img_0001.gate.pgm", "img_0001.overlay.ppm"]
    np.testing.assert_array_equal(_netpbm.read_netpbm(written[0]), heatmap.gray)
    np.testing.assert_array_equal(_netpbm.read_netpbm(written[1]), heatmap.overlay)
    assert written[0].read_bytes().startswith(b"P5")


# Comparison harness -------------------------------------------------------------------------


def test_comparison_table_csv(tmp_path: Path):
    table = ComparisonTable(
        [
            ComparisonRow("gcg", 0.5, 0.25, None, 0.125, 0.0, None),
            ComparisonRow("none", 1.0, 1.0, 1.0, 1.0, 1.0, 1.0),
        ]
    )
    lines = table.to_csv().splitlines()
    assert lines[0] == "approach,accuracy,precision,recall,f1,kappa,auc"
    assert lines[1] == "gcg,0.500000,0.250000,,0.125000,0.000000,"
    csv_path, json_path = table.write(tmp_path)
    assert ComparisonTable.read_csv(csv_path) == table
    assert json_path.name == "comparison.json"


def test_compare_attention_variants(tmp_path: Path):
    model_config = tiny_model_config()
    train_config = TrainConfig(epochs=1, batch_size=4, seed=3)
    train = random_dataset(12, model_config, seed=1)
    val = random_dataset(6, model_config, seed=2)
    table = compare_attention_variants(
        train, val, ["gcg", "none", "gcg"], model_config, train_config, tmp_path, max_workers=2
    )
    assert [row.approach for row in table.rows] == ["gcg", "none", "gcg"]
    # identical seed and data: repeated variants agree
    assert table.rows[0] == table.rows[2]
    assert all(0.0 <= row.accuracy <= 1.0 for row in table.rows)
    assert (tmp_path / "none" / "best.ckpt").exists()
    assert (tmp_path / "gcg-0" / "train_log.jsonl").exists()
    assert (tmp_path / "gcg-2" / "best.ckpt").exists()
    with (tmp_path / "comparison.csv").open(newline="") as handle:
        assert tuple(next(csv.reader(handle))) == COMPARISON_COLUMNS

    serial = compare_attention_variants(
        train, val, ["none"], model_config, train_config, max_workers=1
    )
    assert serial.rows[0] == table.rows[1]


def test_compare_rejects_bad_variants():
    model_config = tiny_model_config()
    train = random_dataset(6, model_config)
    with pytest.raises(ConfigurationError, match="Unknown attention kind"):
        compare_attention_variants(train, None, ["lstm"], model_config, TrainConfig(epochs=1))
    with pytest.raises(ConfigurationError, match="No attention variants"):
        compare_attention_variants(train, None, [], model_config, TrainConfig(epochs=1))
