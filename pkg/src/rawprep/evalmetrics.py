"""COCO-style detection scoring: greedy matching, 101-point interpolated AP.

Matching runs per image, class and IoU threshold: predictions sorted by
score (ties to earlier insertion) greedily claim the unmatched ground-truth
box with the highest IoU at or above the threshold. Matches pool across
images into one precision-recall curve per (class, threshold); AP averages
the monotone precision envelope at 101 evenly spaced recall points. Classes
with no ground truth in the split are excluded from every mean and recorded
in the counts instead.

Size-restricted AP buckets ground truth by area terciles of the split.
Out-of-bucket ground truth is ignore-only: predictions matching it drop out
of the curve, and unmatched predictions count as false positives only when
their own area falls inside the bucket.
"""

from dataclasses import dataclass

import numpy as np

from .detector import iou

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
SIZE_NAMES = ("small", "medium", "large")
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    map: float
    map50: float
    per_class: dict
    per_size: dict
    counts: dict
    iou_thresholds: tuple = DEFAULT_IOU_THRESHOLDS

    def validate(self):
        values = [self.map, self.map50, *self.per_class.values()]
        values += list(self.per_size.values())
        if any(not 0.0 <= v <= 1.0 for v in values if not np.isnan(v)):
            raise ValueError("AP values must lie in [0, 1]")
        return self

    def as_dict(self):
        return {
            "map": self.map, "map50": self.map50,
            "per_class": {int(k): v for k, v in self.per_class.items()},
            "per_size": dict(self.per_size),
            "counts": dict(self.counts), "iou_thresholds": list(self.iou_thresholds),
        }


def ap_101(scores, tp_flags, n_gt):
    """AP from pooled match flags via the interpolated 101-point rule."""
    if n_gt == 0:
        return float("nan")
    if len(scores) == 0:
        return 0.0
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))
    tp = np.asarray(tp_flags, dtype=np.float64)[order]
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # monotone envelope: best precision at this recall or beyond
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(interp.mean())


@dataclass
class MatchRecord:
    pred: object
    tp: bool
    absorbed: bool  # matched an ignored ground truth; leaves the curve


def match_one_image(gts, preds, threshold, ignore_mask=None):
    """Greedy score-descending matching for one image and one class.

    Returns MatchRecords in visit order (score desc, insertion order on
    ties). A prediction claims the unmatched live ground truth of highest
    IoU >= threshold; failing that, an ignored ground truth may absorb it.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    matched = [False] * len(gts)
    records = []
    for pi in order:
        pred = preds[pi]
        best_iou, best_gt = 0.0, -1
        for gi, gt in enumerate(gts):
            if matched[gi] or (ignore_mask is not None and ignore_mask[gi]):
                continue
            overlap = iou(pred, gt)
            if overlap >= threshold and overlap > best_iou:
                best_iou, best_gt = overlap, gi
        if best_gt >= 0:
            matched[best_gt] = True
            records.append(MatchRecord(pred, True, False))
            continue
        absorbed = False
        if ignore_mask is not None:
            for gi, gt in enumerate(gts):
                if matched[gi] or not ignore_mask[gi]:
                    continue
                if iou(pred, gt) >= threshold:
                    matched[gi] = True
                    absorbed = True
                    break
        records.append(MatchRecord(pred, False, absorbed))
    return records


def _class_sets(gt_by_image, preds_by_image):
    labels = set()
    for boxes in gt_by_image:
        labels.update(b.label for b in boxes)
    pred_labels = set()
    for boxes in preds_by_image:
        pred_labels.update(b.label for b in boxes)
    return sorted(labels), sorted(pred_labels)


def _area_buckets(gt_by_image):
    areas = np.array([b.area for boxes in gt_by_image for b in boxes], dtype=np.float64)
    if areas.size == 0:
        return None
    q1, q2 = np.quantile(areas, [1 / 3, 2 / 3])
    return {"small": (0.0, q1), "medium": (q1, q2), "large": (q2, float("inf"))}


def _in_bucket(area, bucket):
    lo, hi = bucket
    return lo <= area < hi or (hi == float("inf") and area >= lo)


def _pooled_ap(gts_c, preds_c, threshold, bucket=None):
    """One (class, threshold) AP, optionally restricted to an area bucket."""
    scores, tps = [], []
    n_gt = 0
    for gts, preds in zip(gts_c, preds_c):
        if bucket is None:
            ignore = None
            n_gt += len(gts)
        else:
            ignore = [not _in_bucket(g.area, bucket) for g in gts]
            n_gt += sum(1 for flag in ignore if not flag)
        for rec in match_one_image(gts, preds, threshold, ignore_mask=ignore):
            if rec.absorbed:
                continue
            if not rec.tp and bucket is not None and not _in_bucket(rec.pred.area, bucket):
                continue  # out-of-bucket false positives are ignored
            scores.append(rec.pred.score)
            tps.append(1.0 if rec.tp else 0.0)
    return ap_101(scores, tps, n_gt), n_gt


def evaluate_detections(gt_by_image, preds_by_image, iou_thresholds=DEFAULT_IOU_THRESHOLDS):
    """Score predictions against ground truth; see module docstring for rules."""
    if len(gt_by_image) != len(preds_by_image):
        raise ValueError(f"{len(gt_by_image)} ground-truth images vs {len(preds_by_image)} prediction images")
    iou_thresholds = tuple(float(t) for t in iou_thresholds)
    if list(iou_thresholds) != sorted(iou_thresholds):
        raise ValueError("iou_thresholds must be sorted ascending")
    gt_classes, pred_classes = _class_sets(gt_by_image, preds_by_image)
    buckets = _area_buckets(gt_by_image)

    split = {cls: ([[b for b in boxes if b.label == cls] for boxes in gt_by_image],
                   [[b for b in boxes if b.label == cls] for boxes in preds_by_image])
             for cls in gt_classes}

    per_class_t = {(cls, t): _pooled_ap(*split[cls], t)[0]
                   for cls in gt_classes for t in iou_thresholds}
    per_class = {cls: float(np.mean([per_class_t[(cls, t)] for t in iou_thresholds]))
                 for cls in gt_classes}
    all_aps = [per_class_t[(cls, t)] for cls in gt_classes for t in iou_thresholds]
    map_all = float(np.mean(all_aps)) if all_aps else float("nan")
    aps50 = [per_class_t[(cls, 0.5)] for cls in gt_classes if (cls, 0.5) in per_class_t]
    map50 = float(np.mean(aps50)) if aps50 else float("nan")

    per_size = {}
    if buckets is not None:
        for name in SIZE_NAMES:
            aps = []
            for cls in gt_classes:
                for t in iou_thresholds:
                    ap, n_gt_bucket = _pooled_ap(*split[cls], t, bucket=buckets[name])
                    if n_gt_bucket > 0:
                        aps.append(ap)
            per_size[name] = float(np.mean(aps)) if aps else float("nan")

    counts = {
        "n_images": len(gt_by_image),
        "n_gt": int(sum(len(b) for b in gt_by_image)),
        "n_pred": int(sum(len(b) for b in preds_by_image)),
        "gt_per_class": {int(c): int(sum(1 for boxes in gt_by_image for b in boxes if b.label == c))
                         for c in gt_classes},
        "classes_evaluated": [int(c) for c in gt_classes],
        "pred_only_classes": [int(c) for c in pred_classes if c not in gt_classes],
    }
    return EvalResult(map_all, map50, per_class, per_size, counts, iou_thresholds).validate()
