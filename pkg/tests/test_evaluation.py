import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from anglekit.errors import EvaluationError
from anglekit.evaluation import (AblationRow, ClassificationSummary, EDSummary, LocalizationResult, ScoredSample,
                                 ablation_table, ed_error, image_level, read_predictions, roc_auc,
                                 round_half_even, summarize_classification, threshold_metrics, write_predictions,
                                 write_report)
from anglekit.geometry import Point2D


def _samples(scores, labels):
    return [ScoredSample(f"img{i}", "left", float(s), int(y)) for i, (s, y) in enumerate(zip(scores, labels))]


def _brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc(_samples([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0
    assert roc_auc(_samples([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1])) == 0.0
    assert roc_auc(_samples([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])) == pytest.approx(0.75)


def test_auc_needs_both_classes():
    with pytest.raises(EvaluationError):
        roc_auc(_samples([0.1, 0.2], [1, 1]))


def test_auc_matches_pairwise_count_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(4, 40))
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        auc = roc_auc(_samples(scores, labels))
        assert abs(auc - _brute_force_auc(scores, labels)) <= 1e-12
        assert auc + roc_auc(_samples(scores, 1 - labels)) == pytest.approx(1.0, abs=1e-12)
        assert roc_auc(_samples(scores ** 3, labels)) == pytest.approx(auc, abs=1e-12)


@pytest.mark.parametrize("n", [100, 250, 500])
def test_auc_with_heavy_ties_at_scale(n):
    rng = np.random.default_rng(n)
    for levels in (3, 11):
        scores = rng.integers(0, levels, n) / (levels - 1)
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        auc = roc_auc(_samples(scores, labels))
        assert abs(auc - _brute_force_auc(scores, labels)) <= 1e-12
        assert auc == pytest.approx(roc_auc_score(labels, scores), abs=1e-9)


def test_threshold_metrics_example():
    rates = threshold_metrics(_samples([0.6, 0.4, 0.7, 0.2], [1, 1, 0, 0]))
    assert rates == {"sensitivity": 0.5, "specificity": 0.5, "accuracy": 0.5}


def test_threshold_metrics_single_class_and_empty():
    rates = threshold_metrics(_samples([0.6, 0.4], [1, 1]))
    assert rates["sensitivity"] == 0.5 and math.isnan(rates["specificity"])
    with pytest.raises(EvaluationError):
        threshold_metrics([])


def test_scored_sample_validation():
    with pytest.raises(EvaluationError):
        ScoredSample("a", "left", 1.5, 0)
    with pytest.raises(EvaluationError):
        ScoredSample("a", "left", 0.5, 2)


def test_image_level_takes_max_over_halves():
    halves = [ScoredSample("a", "left", 0.2, 0), ScoredSample("a", "right", 0.7, 0),
              ScoredSample("b", "left", 0.4, 1), ScoredSample("b", "right", 0.1, 1)]
    images = {s.image_id: s for s in image_level(halves)}
    assert images["a"].score == 0.7 and images["b"].score == 0.4
    assert images["b"].label == 1


def test_summarize_classification_tolerates_single_class():
    summary = summarize_classification(_samples([0.6, 0.4], [1, 1]))
    assert math.isnan(summary.auc) and summary.count == 2


def _result(side, pred, gt):
    return LocalizationResult("img", side, Point2D(*pred), Point2D(*gt))


def test_ed_examples():
    ed = ed_error([_result("left", (0, 0), (3, 4)), _result("right", (5, 5), (5, 5))])
    assert (ed.left, ed.right, ed.avg) == (5.0, 0.0, 2.5)
    assert (ed.count_left, ed.count_right) == (1, 1)


def test_ed_is_translation_invariant():
    rng = np.random.default_rng(3)
    results, shifted = [], []
    for side in ("left", "right") * 10:
        pred, gt = rng.uniform(0, 500, 2), rng.uniform(0, 500, 2)
        shift = rng.uniform(-100, 100, 2)
        results.append(_result(side, pred, gt))
        shifted.append(_result(side, pred + shift, gt + shift))
    a, b = ed_error(results), ed_error(shifted)
    assert a.avg == pytest.approx(b.avg, abs=1e-9)


def test_ed_needs_both_sides():
    with pytest.raises(EvaluationError):
        ed_error([_result("left", (0, 0), (1, 1))])


def test_round_half_even():
    assert round_half_even(12.005) == "12.00"
    assert round_half_even((10.28 + 13.73) / 2) == "12.00"
    assert round_half_even(12.015) == "12.02"
    assert round_half_even(float("nan")) == "nan"


def test_ablation_table_marks_enabled_components():
    ed = EDSummary(10.0, 12.0, 11.0, 5, 5)
    rows = [AblationRow.from_flags({"encoder_variant": "default4", "ppm_enabled": False, "loc_loss": "mse"}, ed),
            AblationRow.from_flags({"encoder_variant": "scaled_mbconv", "ppm_enabled": True, "loc_loss": "kr"}, ed)]
    frame = ablation_table(rows)
    assert list(frame["PPM"]) == ["", "✓"]
    assert list(frame["Avg ED"]) == ["11.00", "11.00"]


def test_write_report(tmp_path):
    samples = _samples([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    results = [_result("left", (0, 0), (3, 4)), _result("right", (1, 1), (1, 2))]
    ed = ed_error(results)
    written = write_report(tmp_path, classification={"anglekit": summarize_classification(samples)},
                           localization={"anglekit": ed},
                           ablation=[AblationRow(True, True, True, ed)], samples=samples, results=results)
    assert set(written) == {"report.md", "report.csv", "roc.png", "ed_hist.png"}
    text = (tmp_path / "report.md").read_text(encoding="utf-8")
    assert "✓" in text and "rounded half-to-even" in text
    assert "| Method | AUC | Sensitivity | Specificity | Accuracy |" in text
    assert "| anglekit | 0.75 | 0.50 | 1.00 | 0.75 |" in text
    assert "| Encoder | PPM | KR loss |" in text
    assert "3.00" in text
    with pytest.raises(EvaluationError):
        write_report(tmp_path / "empty")


def test_predictions_round_trip(tmp_path):
    rows = [{"image_id": "007", "side": "left", "score": 0.25, "pred_x": 1.5, "pred_y": 2.5}]
    frame = read_predictions(write_predictions(rows, tmp_path / "predictions.csv"))
    assert frame.loc[0, "image_id"] == "007"
    assert frame.loc[0, "pred_x"] == 1.5
    with pytest.raises(EvaluationError):
        read_predictions(tmp_path / "missing.csv")


def test_classification_summary_fields():
    summary = summarize_classification(_samples([0.6, 0.4, 0.7, 0.2], [1, 1, 0, 0]))
    assert summary == ClassificationSummary(0.5, 0.5, 0.5, 0.5, 4)
