import itertools
from fractions import Fraction

import numpy as np
import pandas as pd
import pytest

from ttaforge.core import BoundingBox, CategorySpace, Prediction
from ttaforge.evalkit import (
    COCO_IOU_THRESHOLDS,
    average_precision,
    evaluate,
    evaluate_coco,
    match,
    precision_recall_curve,
    tp_fp_histogram,
    write_histogram,
    write_pr_curve,
    write_results,
)


def test_ap_examples():
    assert average_precision([(0.9, True), (0.8, True)], 2) == 1.0
    assert average_precision([(0.9, False), (0.8, True)], 1) == 0.5
    assert average_precision([(0.9, True), (0.8, False), (0.7, True)], 3) == pytest.approx((1 + 2 / 3) / 3)
    assert average_precision([(0.9, False)], 2) == 0.0
    assert average_precision([], 2) == 0.0
    assert average_precision([], 0) is None
    assert average_precision([(0.5, False)], 0) == 0.0
    with pytest.raises(ValueError):
        average_precision([], -1)


def test_ap_ranks_by_score_not_input_order():
    assert average_precision([(0.2, False), (0.9, True)], 1) == 1.0


def test_precision_recall_curve():
    points = precision_recall_curve([(0.3, True), (0.9, False), (0.6, True)], 4)
    assert points == [(0.0, 0.0, 0.9), (0.25, 0.5, 0.6), (0.5, 2 / 3, 0.3)]


def test_match_is_greedy_by_score():
    gt = [BoundingBox(0, 0, 10, 10), BoundingBox(20, 0, 30, 10)]
    dets = [
        (BoundingBox(0, 0, 10, 9), 0.5),
        (BoundingBox(0, 0, 10, 10), 0.9),
        (BoundingBox(21, 0, 30, 10), 0.7),
        (BoundingBox(50, 50, 60, 60), 0.8),
    ]
    assert match(dets, gt, 0.5) == [(0.9, True), (0.8, False), (0.7, True), (0.5, False)]
    assert match(dets, [], 0.5) == [(0.9, False), (0.8, False), (0.7, False), (0.5, False)]
    assert match([], gt, 0.5) == []


def test_match_threshold():
    gt = [BoundingBox(0, 0, 10, 10)]
    half = BoundingBox(0, 0, 10, 5)
    assert match([(half, 1.0)], gt, 0.5) == [(1.0, True)]
    assert match([(half, 1.0)], gt, 0.55) == [(1.0, False)]


def oracle_ap(dets, gt_slots):
    """Exact AP by area under the interpolated curve, for boxes that either coincide or are disjoint."""
    if not gt_slots:
        return None if not dets else Fraction(0)
    taken, hits = set(), []
    # dets arrive in descending score order
    for slot in dets:
        hit = slot in gt_slots and slot not in taken
        if hit:
            taken.add(slot)
        hits.append(hit)
    recalls, precisions, tp = [], [], 0
    for k, hit in enumerate(hits, start=1):
        tp += hit
        recalls.append(Fraction(tp, len(gt_slots)))
        precisions.append(Fraction(tp, k))
    area, previous = Fraction(0), Fraction(0)
    for level in sorted(set(recalls)):
        if level == 0:
            continue
        best = max(p for r, p in zip(recalls, precisions) if r >= level)
        area += (level - previous) * best
        previous = level
    return area


def test_ap_matches_exhaustive_oracle():
    slots = [BoundingBox(2 * i, 0, 2 * i + 1, 1) for i in range(4)]
    cases = 0
    for num_gt in range(4):
        for gt_slots in itertools.combinations(range(4), num_gt):
            for num_dets in range(6):
                for dets in itertools.product(range(4), repeat=num_dets):
                    scored = [(slots[s], 1.0 - 0.1 * k) for k, s in enumerate(dets)]
                    records = match(scored, [slots[s] for s in gt_slots], 0.5)
                    expected = oracle_ap(dets, set(gt_slots))
                    got = average_precision(records, len(gt_slots))
                    if expected is None:
                        assert got is None
                    else:
                        assert got == pytest.approx(float(expected), abs=1e-12)
                    cases += 1
    assert cases > 10000


def test_tp_fp_histogram():
    records = [(0.05, True), (0.95, False), (3.2, True), (-0.1, False), (0.55, True)]
    edges, tp, fp = tp_fp_histogram(records, bins=10)
    np.testing.assert_allclose(edges, np.linspace(0, 1, 11))
    assert tp.sum() == 3 and fp.sum() == 2
    assert tp[0] == 1 and tp[5] == 1 and tp[9] == 1
    assert fp[0] == 1 and fp[9] == 1
    with pytest.raises(ValueError):
        tp_fp_histogram(records, bins=0)


@pytest.fixture
def evaluation():
    categories = CategorySpace(("square", "disk", "triangle"))
    ground_truth = {
        0: [(BoundingBox(0, 0, 10, 10), 0), (BoundingBox(20, 20, 30, 30), 1)],
        1: [(BoundingBox(5, 5, 15, 15), 0)],
        2: [],
    }
    predictions = [
        Prediction(0, BoundingBox(0, 0, 10, 10), 0.9, 0),
        Prediction(0, BoundingBox(20, 20, 30, 30), 0.8, 0),
        Prediction(0, BoundingBox(20, 20, 30, 30), 0.7, 1),
        Prediction(1, BoundingBox(6, 6, 15, 15), 0.6, 0),
        Prediction(2, BoundingBox(0, 0, 4, 4), 0.95, 0),
    ]
    return categories, ground_truth, predictions


def test_evaluate(evaluation):
    categories, ground_truth, predictions = evaluation
    record = evaluate(predictions, ground_truth, categories, 0.5)
    assert record.gt_counts[0] == 2 and record.gt_counts[1] == 1
    assert record.tp(0) == 2 and record.fp(0) == 2
    # ranked: 0.95 FP, 0.9 TP, 0.8 FP, 0.6 TP
    assert record.ap(0) == pytest.approx((1 / 2 + 2 / 4) / 2)
    assert record.ap(1) == 1.0
    assert record.ap(2) is None
    assert record.mean_ap == pytest.approx((0.5 + 1.0) / 2)


def test_evaluate_coco(evaluation):
    categories, ground_truth, predictions = evaluation
    assert len(COCO_IOU_THRESHOLDS) == 10
    coco_map, records = evaluate_coco(predictions, ground_truth, categories)
    assert [r.iou_thresh for r in records] == list(COCO_IOU_THRESHOLDS)
    assert coco_map == pytest.approx(np.mean([r.mean_ap for r in records]))
    assert coco_map <= records[0].mean_ap


def test_csv_writers(evaluation, tmp_path):
    categories, ground_truth, predictions = evaluation
    record = evaluate(predictions, ground_truth, categories, 0.5)

    write_results(record, tmp_path / "results.csv", coco_map=0.25)
    frame = pd.read_csv(tmp_path / "results.csv")
    assert list(frame.columns) == ["category", "gt_count", "tp", "fp", "ap50", "map_50_95"]
    assert list(frame["category"]) == ["square", "disk", "triangle", "all"]
    assert frame["ap50"].iloc[-1] == pytest.approx(0.75)
    assert frame["map_50_95"].iloc[-1] == pytest.approx(0.25)
    assert np.isnan(frame["ap50"].iloc[2])

    write_pr_curve(record, tmp_path / "pr.csv")
    curve = pd.read_csv(tmp_path / "pr.csv")
    assert len(curve) == 5
    assert curve["recall"].max() == pytest.approx(1.0)

    write_histogram(record, tmp_path / "hist.csv", bins=5)
    hist = pd.read_csv(tmp_path / "hist.csv")
    assert list(hist.columns) == ["bin_lo", "bin_hi", "tp", "fp"]
    assert hist["tp"].sum() == 3 and hist["fp"].sum() == 2


def test_ap_depends_only_on_score_order(evaluation):
    rng = np.random.default_rng(7)
    for _ in range(50):
        scores = rng.uniform(-1, 1, size=rng.integers(1, 20))
        hits = rng.random(len(scores)) < 0.5
        gt_count = int(hits.sum()) + int(rng.integers(0, 3))
        records = list(zip(scores.tolist(), hits.tolist()))
        stretched = [(float(np.exp(3 * s) + 1), hit) for s, hit in records]
        assert average_precision(stretched, gt_count) == pytest.approx(average_precision(records, gt_count))

    categories, ground_truth, predictions = evaluation
    stretched = [Prediction(p.image_id, p.box, float(np.exp(3 * p.score) + 1), p.category) for p in predictions]
    for thresh in (0.5, 0.75):
        assert evaluate(stretched, ground_truth, categories, thresh).aps == evaluate(
            predictions, ground_truth, categories, thresh
        ).aps


def test_results_column_follows_iou_threshold(evaluation, tmp_path):
    categories, ground_truth, predictions = evaluation
    record = evaluate(predictions, ground_truth, categories, 0.7)
    assert record.metric_name == "ap70"
    write_results(record, tmp_path / "results.csv")
    frame = pd.read_csv(tmp_path / "results.csv")
    assert list(frame.columns) == ["category", "gt_count", "tp", "fp", "ap70"]
    assert frame["ap70"].iloc[-1] == pytest.approx(record.mean_ap)
    assert evaluate(predictions, ground_truth, categories, 0.5).metric_name == "ap50"
