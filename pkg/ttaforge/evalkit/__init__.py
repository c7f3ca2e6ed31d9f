"""
Detection evaluation: greedy IoU matching, all-points average precision, precision/recall curves and the score
histograms of true and false positives.
"""
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ttaforge import msg
from ttaforge.core import BoundingBox, CategorySpace, Prediction, iou

COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))

# (score, is_tp)
MatchRecord = Tuple[float, bool]


def match(detections: Sequence[Tuple[BoundingBox, float]], ground_truth: Sequence[BoundingBox],
          iou_thresh: float = 0.5) -> List[MatchRecord]:
    """
    Greedy matching for one image and one category.

    Detections are visited by descending score (equal scores keep their input order). Each takes the unmatched ground
    truth box it overlaps most; with IoU >= ``iou_thresh`` it is a true positive and consumes that box.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    taken = [False] * len(ground_truth)
    out = []
    for i in order:
        box, score = detections[i]
        best, best_iou = -1, -1.0
        for j, gt in enumerate(ground_truth):
            if taken[j]:
                continue
            overlap = iou(box, gt)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0 and best_iou >= iou_thresh:
            taken[best] = True
            out.append((float(score), True))
        else:
            out.append((float(score), False))
    return out


def _ranked(records: Sequence[MatchRecord]) -> List[MatchRecord]:
    return sorted(records, key=lambda r: -r[0])


def precision_recall_curve(records: Sequence[MatchRecord], gt_count: int) -> List[Tuple[float, float, float]]:
    """(recall, precision, score) after each ranked detection; recall is 0 throughout when ``gt_count`` is 0."""
    tp = fp = 0
    points = []
    for score, is_tp in _ranked(records):
        if is_tp:
            tp += 1
        else:
            fp += 1
        recall = tp / gt_count if gt_count else 0.0
        points.append((recall, tp / (tp + fp), score))
    return points


def average_precision(records: Sequence[MatchRecord], gt_count: int) -> Optional[float]:
    """
    All-points interpolated AP.

    Returns
    -------
    float or None
        None when there is neither ground truth nor any detection (the category does not count towards the mean);
        0.0 when there is no ground truth but something was detected.
    """
    if gt_count < 0:
        raise ValueError("gt_count must be non-negative")
    if gt_count == 0:
        return None if not records else 0.0
    points = precision_recall_curve(records, gt_count)
    if not points:
        return 0.0
    precision = np.array([p for _, p, _ in points])
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    hits = np.array([is_tp for _, is_tp in _ranked(records)])
    return float(envelope[hits].sum() / gt_count)


def tp_fp_histogram(records: Sequence[MatchRecord], bins: int = 10,
                    score_range: Tuple[float, float] = (0.0, 1.0)) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Score histograms of true and false positives over ``bins`` equal bins of ``score_range``.

    Scores beyond the range (enhanced scores can exceed 1) are counted in the outermost bins.

    Returns
    -------
    (edges, tp_counts, fp_counts)
    """
    if bins < 1:
        raise ValueError("bins must be at least 1")
    lo, hi = score_range
    edges = np.linspace(lo, hi, bins + 1)
    scores = np.clip(np.array([s for s, _ in records], dtype=np.float64), lo, hi)
    hits = np.array([t for _, t in records], dtype=bool)
    tp, _ = np.histogram(scores[hits], bins=edges)
    fp, _ = np.histogram(scores[~hits], bins=edges)
    return edges, tp, fp


@dataclass
class EvalRecord:
    categories: CategorySpace
    iou_thresh: float = 0.5
    records: Dict[int, List[MatchRecord]] = field(default_factory=lambda: defaultdict(list))
    gt_counts: Dict[int, int] = field(default_factory=lambda: defaultdict(int))

    def ap(self, category: int) -> Optional[float]:
        return average_precision(self.records[category], self.gt_counts[category])

    @property
    def aps(self) -> Dict[int, Optional[float]]:
        return {c: self.ap(c) for c in range(len(self.categories))}

    @property
    def mean_ap(self) -> float:
        defined = [ap for ap in self.aps.values() if ap is not None]
        return float(np.mean(defined)) if defined else 0.0

    @property
    def metric_name(self) -> str:
        """Column name for the AP at this record's threshold: ``ap50`` at IoU 0.5, ``ap70`` at 0.7."""
        return f"ap{round(100 * self.iou_thresh)}"

    def tp(self, category: int) -> int:
        return sum(1 for _, t in self.records[category] if t)

    def fp(self, category: int) -> int:
        return sum(1 for _, t in self.records[category] if not t)

    def all_records(self) -> List[MatchRecord]:
        return [r for c in range(len(self.categories)) for r in self.records[c]]

    def to_frame(self) -> pd.DataFrame:
        metric, rows = self.metric_name, []
        for c, name in enumerate(self.categories):
            ap = self.ap(c)
            rows.append(
                {
                    "category": name,
                    "gt_count": self.gt_counts[c],
                    "tp": self.tp(c),
                    "fp": self.fp(c),
                    metric: np.nan if ap is None else ap,
                }
            )
        rows.append(
            {
                "category": "all",
                "gt_count": sum(r["gt_count"] for r in rows),
                "tp": sum(r["tp"] for r in rows),
                "fp": sum(r["fp"] for r in rows),
                metric: self.mean_ap,
            }
        )
        return pd.DataFrame(rows, columns=["category", "gt_count", "tp", "fp", metric])


def evaluate(predictions: Iterable[Prediction], ground_truth: Dict[int, Sequence[Tuple[BoundingBox, int]]],
             categories: CategorySpace, iou_thresh: float = 0.5) -> EvalRecord:
    """
    Match ``predictions`` against ``ground_truth`` (image id -> [(box, category)]) image by image and category by
    category. Predictions for images without ground truth entries count as false positives.
    """
    record = EvalRecord(categories, iou_thresh)
    by_image = defaultdict(lambda: defaultdict(list))
    for p in predictions:
        by_image[p.image_id][p.category].append((p.box, p.score))

    for image_id, objects in ground_truth.items():
        for _, category in objects:
            record.gt_counts[category] += 1

    for image_id in sorted(set(by_image) | set(ground_truth)):
        gts = defaultdict(list)
        for box, category in ground_truth.get(image_id, ()):
            gts[category].append(box)
        for category in range(len(categories)):
            dets = by_image[image_id][category]
            if dets:
                record.records[category].extend(match(dets, gts[category], iou_thresh))
    return record


def evaluate_coco(predictions: Iterable[Prediction], ground_truth: Dict[int, Sequence[Tuple[BoundingBox, int]]],
                  categories: CategorySpace) -> Tuple[float, List[EvalRecord]]:
    """mAP averaged over IoU thresholds 0.50:0.05:0.95, with the per-threshold records."""
    predictions = list(predictions)
    records = [evaluate(predictions, ground_truth, categories, t) for t in COCO_IOU_THRESHOLDS]
    return float(np.mean([r.mean_ap for r in records])), records


def write_results(record: EvalRecord, path: Union[str, Path], coco_map: float = None):
    frame = record.to_frame()
    if coco_map is not None:
        frame["map_50_95"] = np.nan
        frame.loc[frame.index[-1], "map_50_95"] = coco_map
    frame.to_csv(path, index=False, float_format="%.6f")
    msg.logMessage(f"Wrote results to {path}", level=msg.DEBUG)


def write_pr_curve(record: EvalRecord, path: Union[str, Path]):
    rows = []
    for c, name in enumerate(record.categories):
        for recall, precision, score in precision_recall_curve(record.records[c], record.gt_counts[c]):
            rows.append({"category": name, "recall": recall, "precision": precision, "score": score})
    pd.DataFrame(rows, columns=["category", "recall", "precision", "score"]).to_csv(
        path, index=False, float_format="%.6f"
    )


def write_histogram(record: EvalRecord, path: Union[str, Path], bins: int = 10):
    edges, tp, fp = tp_fp_histogram(record.all_records(), bins)
    pd.DataFrame({"bin_lo": edges[:-1], "bin_hi": edges[1:], "tp": tp, "fp": fp}).to_csv(
        path, index=False, float_format="%.6f"
    )
