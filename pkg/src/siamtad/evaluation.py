"""THUMOS-convention scoring: per-class AP and mAP at IoU thresholds.

A detection is correct only with the right class and temporal IoU strictly
greater than the threshold; each ground-truth instance matches at most one
detection. AP is the non-interpolated area under the stepwise PR curve and
is isolated in one function so an interpolated variant could slot in.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .detection import Detection, GroundTruthInstance, sort_detections, temporal_iou

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)

log = logging.getLogger(__name__)


@dataclass
class EvalResult:
    """AP per threshold and class, mAP per threshold, and GT class counts.

    mAP averages exactly the classes with at least one ground-truth
    instance; ap maps carry the same class set.
    """

    thresholds: tuple[float, ...]
    ap: dict[float, dict[int, float]]
    mean_ap: dict[float, float]
    gt_counts: dict[int, int]
    ignored_detections: int = 0
    classes: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        self.classes = tuple(sorted(self.gt_counts))


def match_detections(detections: list[Detection],
                     ground_truth: list[GroundTruthInstance],
                     class_id: int, iou_threshold: float) -> list[bool]:
    """Greedy hit/miss flags for the detections of one class.

    Detections must arrive sorted by descending score. Only detections with
    class_id are considered; flags align with that subsequence. A detection
    hits iff an unmatched same-video instance of the class has IoU strictly
    above the threshold; it consumes the highest-IoU such instance, ties
    broken by earliest start.
    """
    scores = [d.score for d in detections]
    if any(a < b for a, b in zip(scores, scores[1:])):
        raise ValueError("detections must be sorted by descending score")
    instances = [g for g in ground_truth if g.class_id == class_id]
    used = [False] * len(instances)
    flags = []
    for d in detections:
        if d.class_id != class_id:
            continue
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(instances):
            if used[j] or g.video_id != d.video_id:
                continue
            v = temporal_iou(d.segment, g.segment)
            if v <= iou_threshold:
                continue
            if (v > best_iou or best_j < 0
                    or (v == best_iou and g.segment.start < instances[best_j].segment.start)):
                best_iou, best_j = v, j
        if best_j >= 0:
            used[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: list[bool], n_ground_truth: int) -> float:
    """Non-interpolated AP over a ranked hit/miss list.

    Recall only moves on hits, so the area contribution of rank k is
    precision(k) / n_ground_truth at hits and zero at misses.
    """
    if n_ground_truth < 0:
        raise ValueError("n_ground_truth must be nonnegative")
    if n_ground_truth == 0 or not flags:
        return 0.0
    ap = 0.0
    hits = 0
    for k, flag in enumerate(flags, start=1):
        if flag:
            hits += 1
            ap += (hits / k) / n_ground_truth
    return ap


def evaluate(detections: list[Detection],
             ground_truth: list[GroundTruthInstance],
             thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS) -> EvalResult:
    """AP per class and mAP at every threshold.

    Detections on videos absent from the ground truth are reported and
    ignored. Classes are the ground-truth classes; mAP averages those with
    at least one instance.
    """
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    known = {g.video_id for g in ground_truth}
    kept = [d for d in detections if d.video_id in known]
    ignored = len(detections) - len(kept)
    if ignored:
        strays = sorted({d.video_id for d in detections if d.video_id not in known})
        log.warning("ignoring %d detection(s) on unknown video(s): %s",
                    ignored, ", ".join(strays))
    ranked = sort_detections(kept)
    gt_counts: dict[int, int] = {}
    for g in ground_truth:
        gt_counts[g.class_id] = gt_counts.get(g.class_id, 0) + 1
    classes = sorted(gt_counts)
    ap: dict[float, dict[int, float]] = {}
    mean_ap: dict[float, float] = {}
    for th in thresholds:
        per_class = {
            cls: average_precision(match_detections(ranked, ground_truth, cls, th),
                                   gt_counts[cls])
            for cls in classes}
        ap[th] = per_class
        mean_ap[th] = (sum(per_class.values()) / len(classes)) if classes else 0.0
    return EvalResult(thresholds=tuple(thresholds), ap=ap, mean_ap=mean_ap,
                      gt_counts=gt_counts, ignored_detections=ignored)


def write_eval_csv(result: EvalResult, path: str | Path) -> None:
    """One row per class, one column per threshold, final mAP row."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["class"] + [f"{th:g}" for th in result.thresholds])
        for cls in result.classes:
            writer.writerow([cls] + [f"{result.ap[th][cls]:.6f}"
                                     for th in result.thresholds])
        writer.writerow(["mAP"] + [f"{result.mean_ap[th]:.6f}"
                                   for th in result.thresholds])


def read_eval_csv(path: str | Path) -> dict[str, dict[float, float]]:
    """Rows keyed by the class column (class ids as strings, plus 'mAP')."""
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows or rows[0][:1] != ["class"]:
        raise ValueError(f"{path}: not an evaluation CSV")
    thresholds = [float(v) for v in rows[0][1:]]
    return {row[0]: dict(zip(thresholds, (float(v) for v in row[1:])))
            for row in rows[1:]}
