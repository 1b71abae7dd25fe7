"""Detection metrics: IoU-thresholded matching, detected-ground-truth ratio,
interpolated average precision, max recall, difficulty filtering.

Matching is greedy in descending score order (KITTI-devkit style): each
prediction claims the highest-IoU still-unmatched ground truth at or above
the threshold. Ground truths filtered out by a difficulty level are
"ignored": they do not count toward the ground-truth total and a prediction
matching one is neither a true nor a false positive. Precision/recall
curves pool predictions over all scenes under a single global score
ranking.
"""
from __future__ import annotations

from dataclasses import dataclass
import json
from pathlib import Path

import numpy as np

from .geometry import Box3D, Detection, iou_3d
from .kitti import GroundTruth

# class -> matching IoU threshold
CLASS_IOU_THRESHOLDS = {"car": 0.7, "pedestrian": 0.5, "cyclist": 0.5}

# level -> (min image-box height px, max occlusion, max truncation)
DIFFICULTY_LEVELS = {
    "easy": (40.0, 0, 0.15),
    "moderate": (25.0, 1, 0.30),
    "hard": (25.0, 2, 0.50),
}


@dataclass
class MatchResult:
    """Per-prediction and per-ground-truth matching outcome for one scene."""

    scores: np.ndarray  # input order
    matched_gt: list  # gt index or None, input order
    iou: np.ndarray  # achieved IoU, input order (0 when unmatched)
    ignored: np.ndarray  # prediction matched only an ignored gt
    gt_detected: np.ndarray  # per gt, including ignored ones
    gt_ignored: np.ndarray  # per gt
    n_gt: int  # ground truths that count (ignored excluded)


def match(
    gts: list[Box3D],
    preds: list[Detection],
    iou_threshold: float,
    ignore_mask=None,
) -> MatchResult:
    """Greedy score-ordered one-to-one matching at the given IoU threshold."""
    if not (0.0 < iou_threshold <= 1.0):
        raise ValueError("iou_threshold must be in (0, 1]")
    n_gt_total = len(gts)
    ignore = (
        np.zeros(n_gt_total, dtype=bool)
        if ignore_mask is None
        else np.asarray(ignore_mask, dtype=bool)
    )
    scores = np.array([p.score for p in preds])
    # stable sort on negated score keeps input order among equal scores
    order = np.argsort(-scores, kind="stable")
    taken = np.zeros(n_gt_total, dtype=bool)
    matched_gt = [None] * len(preds)
    achieved = np.zeros(len(preds))
    pred_ignored = np.zeros(len(preds), dtype=bool)
    gt_detected = np.zeros(n_gt_total, dtype=bool)
    for pi in order:
        pred = preds[pi]
        if pred.box is None:
            continue
        best, best_iou = None, iou_threshold
        best_ignored, best_ignored_iou = None, iou_threshold
        for gi, gt_box in enumerate(gts):
            if taken[gi]:
                continue
            value = iou_3d(gt_box, pred.box)
            if value < iou_threshold:
                continue
            if ignore[gi]:
                if best_ignored is None or value > best_ignored_iou:
                    best_ignored, best_ignored_iou = gi, value
            elif best is None or value > best_iou:
                best, best_iou = gi, value
        if best is not None:
            taken[best] = True
            matched_gt[pi] = best
            achieved[pi] = best_iou
            gt_detected[best] = True
        elif best_ignored is not None:
            taken[best_ignored] = True
            matched_gt[pi] = best_ignored
            achieved[pi] = best_ignored_iou
            gt_detected[best_ignored] = True
            pred_ignored[pi] = True
    return MatchResult(
        scores=scores,
        matched_gt=matched_gt,
        iou=achieved,
        ignored=pred_ignored,
        gt_detected=gt_detected,
        gt_ignored=ignore,
        n_gt=int((~ignore).sum()),
    )


def ratio(scene_pairs, iou_threshold: float) -> float:
    """Detected ground truths over all ground truths, pooled over scenes and
    blind to difficulty. Zero ground truths yields 0.0 by convention."""
    detected = 0
    total = 0
    for gts, preds in scene_pairs:
        result = match(gts, preds, iou_threshold)
        detected += int(result.gt_detected.sum())
        total += len(gts)
    if total == 0:
        return 0.0
    return detected / total


def _pooled_rows(results: list[MatchResult]):
    """Pool per-scene matches into one global (score, tp, ignored) ranking."""
    rows = []
    for si, res in enumerate(results):
        for pi in range(len(res.scores)):
            tp = res.matched_gt[pi] is not None and not res.ignored[pi]
            rows.append((res.scores[pi], si, pi, tp, bool(res.ignored[pi])))
    rows.sort(key=lambda r: (-r[0], r[1], r[2]))
    return rows


def precision_recall_curve(results: list[MatchResult]):
    """Cumulative (recall, precision) points in global score order."""
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        raise ValueError("average precision is undefined with zero ground truths")
    recalls, precisions = [], []
    tp = fp = 0
    for _, _, _, is_tp, is_ignored in _pooled_rows(results):
        if is_ignored:
            continue
        if is_tp:
            tp += 1
        else:
            fp += 1
        recalls.append(tp / n_gt)
        precisions.append(tp / (tp + fp))
    return np.array(recalls), np.array(precisions)


def average_precision(results: list[MatchResult], n_recall_points: int = 40) -> float:
    """Interpolated AP: mean over recall thresholds {1/R, ..., 1} of the best
    precision achieved at or beyond each threshold."""
    recalls, precisions = precision_recall_curve(results)
    total = 0.0
    for k in range(1, n_recall_points + 1):
        r = k / n_recall_points
        mask = recalls >= r - 1e-12
        total += float(precisions[mask].max()) if mask.any() else 0.0
    return total / n_recall_points


def max_recall(results: list[MatchResult]) -> float:
    """Detected fraction of counted ground truths with every prediction kept."""
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        raise ValueError("recall is undefined with zero ground truths")
    detected = sum(int((res.gt_detected & ~res.gt_ignored).sum()) for res in results)
    return detected / n_gt


def quantize_recall(value: float, n_recall_points: int = 40) -> float:
    """Recall snapped down onto the interpolation grid (comparability helper)."""
    return np.floor(value * n_recall_points) / n_recall_points


def evaluate_class(
    scenes,
    predictions: dict,
    obj_class: str,
    iou_threshold: float | None = None,
    levels=("all", "moderate"),
) -> list[dict]:
    """Full per-class evaluation over a list of scenes.

    ``predictions`` maps scene_id to a list of Detections with boxes.
    Returns report rows: dicts with metric, class, level, threshold, value.
    The ratio is always difficulty-blind; AP and recall are computed per
    requested level.
    """
    threshold = iou_threshold if iou_threshold is not None else CLASS_IOU_THRESHOLDS[obj_class]
    pairs = []
    per_scene_gts = []
    for scene in scenes:
        gts = [gt for gt in scene.ground_truths if gt.obj_class == obj_class]
        preds = [p for p in predictions.get(scene.scene_id, []) if p.box is not None]
        pairs.append(([gt.box for gt in gts], preds))
        per_scene_gts.append(gts)

    rows = [
        {
            "metric": "ratio",
            "class": obj_class,
            "level": "all",
            "threshold": threshold,
            "value": ratio(pairs, threshold),
        }
    ]
    for level in levels:
        results = []
        for (boxes, preds), gts in zip(pairs, per_scene_gts):
            ignore = filter_difficulty(gts, level)
            results.append(match(boxes, preds, threshold, ignore))
        n_gt = sum(r.n_gt for r in results)
        if n_gt == 0:
            continue
        recall_value = max_recall(results)
        rows.append(
            {"metric": "ap", "class": obj_class, "level": level,
             "threshold": threshold, "value": average_precision(results)}
        )
        rows.append(
            {"metric": "max_recall", "class": obj_class, "level": level,
             "threshold": threshold, "value": recall_value}
        )
        rows.append(
            {"metric": "max_recall_q40", "class": obj_class, "level": level,
             "threshold": threshold, "value": quantize_recall(recall_value)}
        )
    return rows


def format_report(rows: list[dict]) -> str:
    """One metric per line: name, class, level, threshold, value."""
    lines = ["# metric class level threshold value"]
    for row in rows:
        lines.append(
            f"{row['metric']} {row['class']} {row['level']} "
            f"{row['threshold']:.2f} {row['value']:.6f}"
        )
    return "\n".join(lines) + "\n"


def write_report(path, rows: list[dict]) -> None:
    """Text report plus a machine-readable JSON twin next to it."""
    path = Path(path)
    path.write_text(format_report(rows))
    json_rows = [
        {**row, "threshold": round(row["threshold"], 6), "value": round(row["value"], 6)}
        for row in rows
    ]
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(json_rows, indent=2, sort_keys=True) + "\n"
    )


def filter_difficulty(gts: list[GroundTruth], level: str) -> np.ndarray:
    """Ignore mask for the ground truths outside the difficulty level."""
    if level == "all":
        return np.zeros(len(gts), dtype=bool)
    if level not in DIFFICULTY_LEVELS:
        raise ValueError(f"unknown difficulty level {level!r}")
    min_height, max_occ, max_trunc = DIFFICULTY_LEVELS[level]
    mask = np.zeros(len(gts), dtype=bool)
    for i, gt in enumerate(gts):
        if gt.bbox_height is None:
            raise ValueError(
                "ground truth lacks an image-box height; difficulty filtering "
                "needs it - use level='all'"
            )
        mask[i] = (
            gt.bbox_height < min_height
            or gt.occlusion > max_occ
            or gt.truncation > max_trunc
        )
    return mask
