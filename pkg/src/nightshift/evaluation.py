"""Detection metrics: per-class AP, mean AP, and area-stratified AP.

Matching is greedy per class in descending score order (ties broken by
detection insertion order): each detection claims the highest-IoU unmatched
ground-truth box at or above the IoU threshold, and each ground-truth box
can be claimed once. AP integrates the all-point precision envelope over
recall. Small/medium/large strata partition ground truth by box area; when
scoring one stratum, ground truth outside it is "ignore" (detections that
match ignored boxes vanish from the tally instead of counting as false
positives, as do unmatched detections whose own area lies outside the
stratum).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_matrix
from .structures import BoxSet

# the usual 32^2 / 96^2 COCO area bounds, rescaled from 600 px reference
# images down to the 128 px desk scale: bound * (128/600)^2
DEFAULT_AREA_BOUNDS = (
    32.0 * 32.0 * (128.0 / 600.0) ** 2,
    96.0 * 96.0 * (128.0 / 600.0) ** 2,
)

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

_STRATA = ("small", "medium", "large")


@dataclass
class EvalResult:
    """AP numbers for one evaluation pass. None means undefined (no GT)."""

    iou: float | str
    ap_per_class: dict[int, float]
    mean_ap: float
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    excluded_classes: list[int] = field(default_factory=list)
    gt_counts: dict[str, int] = field(default_factory=dict)
    det_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iou": self.iou,
            "ap_per_class": {str(k): v for k, v in sorted(self.ap_per_class.items())},
            "mean_ap": self.mean_ap,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "excluded_classes": self.excluded_classes,
            "gt_counts": self.gt_counts,
            "det_counts": self.det_counts,
        }


def _area_stratum(areas: np.ndarray, bounds: tuple[float, float]) -> np.ndarray:
    """0 = small, 1 = medium, 2 = large."""
    lo, hi = bounds
    out = np.full(areas.shape, 1, dtype=np.int64)
    out[areas < lo] = 0
    out[areas >= hi] = 2
    return out


def _collect_class(
    per_image: list[BoxSet], cls: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Per-image (boxes, scores) restricted to one class."""
    boxes, scores = [], []
    for bs in per_image:
        if len(bs) == 0 or bs.class_ids is None:
            boxes.append(np.zeros((0, 4), np.float32))
            scores.append(np.zeros((0,), np.float32))
            continue
        mask = bs.class_ids == cls
        boxes.append(bs.xyxy[mask])
        scores.append(
            bs.scores[mask]
            if bs.scores is not None
            else np.ones(int(mask.sum()), np.float32)
        )
    return boxes, scores


def _match_and_score(
    det_boxes: list[np.ndarray],
    det_scores: list[np.ndarray],
    gt_boxes: list[np.ndarray],
    gt_ignore: list[np.ndarray],
    iou_thresh: float,
    det_ignore_area: tuple[float, float] | None,
) -> float | None:
    """Greedy matching for one class; returns AP or None when no active GT."""
    npos = int(sum((~ig).sum() for ig in gt_ignore))
    if npos == 0:
        return None

    # flatten detections, keeping insertion order for the score tie-break
    img_idx, scores, boxes = [], [], []
    for i, (b, s) in enumerate(zip(det_boxes, det_scores)):
        for j in range(b.shape[0]):
            img_idx.append(i)
            scores.append(float(s[j]))
            boxes.append(b[j])
    if not scores:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")

    matched = [np.zeros(g.shape[0], dtype=bool) for g in gt_boxes]
    tp, fp = [], []
    for k in order:
        i = img_idx[k]
        box = boxes[k]
        g = gt_boxes[i]
        best_active, best_active_iou = -1, iou_thresh
        best_ign, best_ign_iou = -1, iou_thresh
        if g.shape[0]:
            ious = iou_matrix(box[None, :], g)[0]
            for gi in range(g.shape[0]):
                if matched[i][gi]:
                    continue
                iou = ious[gi]
                if gt_ignore[i][gi]:
                    if best_ign < 0:
                        if iou >= best_ign_iou:
                            best_ign, best_ign_iou = gi, iou
                    elif iou > best_ign_iou:
                        best_ign, best_ign_iou = gi, iou
                else:
                    if best_active < 0:
                        if iou >= best_active_iou:
                            best_active, best_active_iou = gi, iou
                    elif iou > best_active_iou:
                        best_active, best_active_iou = gi, iou
        if best_active >= 0:
            matched[i][best_active] = True
            tp.append(1.0)
            fp.append(0.0)
        elif best_ign >= 0:
            matched[i][best_ign] = True  # absorbed by an ignored box: drop
        else:
            if det_ignore_area is not None:
                w = box[2] - box[0]
                h = box[3] - box[1]
                a = float(w * h)
                if not (det_ignore_area[0] <= a < det_ignore_area[1]):
                    continue  # unmatched detection outside the stratum: drop
            tp.append(0.0)
            fp.append(1.0)

    if not tp:
        return 0.0
    tp_arr = np.asarray(tp)
    fp_arr = np.asarray(fp)
    ctp = np.cumsum(tp_arr)
    cfp = np.cumsum(fp_arr)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    return _envelope_ap(recall, precision)


def _envelope_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolation: integrate the running max of precision."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def evaluate(
    detections: list[BoxSet],
    ground_truth: list[BoxSet],
    iou_thresh: float = 0.5,
    area_bounds: tuple[float, float] = DEFAULT_AREA_BOUNDS,
) -> EvalResult:
    """Score a detection run against ground truth.

    `detections[i]` and `ground_truth[i]` describe the same image.
    Detections need scores and class ids; ground truth needs class ids.
    Classes that appear only in detections are excluded from the mean and
    recorded in excluded_classes.
    """
    if len(detections) != len(ground_truth):
        raise ValueError(
            f"{len(detections)} detection sets vs {len(ground_truth)} GT sets"
        )
    gt_classes = sorted(
        {int(c) for bs in ground_truth if bs.class_ids is not None for c in bs.class_ids}
    )
    det_classes = {
        int(c) for bs in detections if bs.class_ids is not None for c in bs.class_ids
    }
    excluded = sorted(det_classes - set(gt_classes))

    gt_strata = [
        _area_stratum(bs.areas(), area_bounds)
        if len(bs)
        else np.zeros((0,), np.int64)
        for bs in ground_truth
    ]

    ap_per_class: dict[int, float] = {}
    strata_aps: dict[str, list[float]] = {s: [] for s in _STRATA}
    for cls in gt_classes:
        det_b, det_s = _collect_class(detections, cls)
        gt_b, _ = _collect_class(ground_truth, cls)
        gt_cls_strata = [
            st[bs.class_ids == cls] if len(bs) else np.zeros((0,), np.int64)
            for bs, st in zip(ground_truth, gt_strata)
        ]
        no_ignore = [np.zeros(g.shape[0], dtype=bool) for g in gt_b]
        ap = _match_and_score(det_b, det_s, gt_b, no_ignore, iou_thresh, None)
        ap_per_class[cls] = 0.0 if ap is None else ap

        lo, hi = area_bounds
        stratum_ranges = {
            "small": (0.0, lo),
            "medium": (lo, hi),
            "large": (hi, float("inf")),
        }
        for si, name in enumerate(_STRATA):
            ignore = [s != si for s in gt_cls_strata]
            ap_s = _match_and_score(
                det_b, det_s, gt_b, ignore, iou_thresh, stratum_ranges[name]
            )
            if ap_s is not None:
                strata_aps[name].append(ap_s)

    mean_ap = float(np.mean(list(ap_per_class.values()))) if ap_per_class else 0.0
    strata_mean = {
        name: (float(np.mean(v)) if v else None) for name, v in strata_aps.items()
    }

    gt_counts = {s: 0 for s in _STRATA}
    for st in gt_strata:
        for si, name in enumerate(_STRATA):
            gt_counts[name] += int((st == si).sum())
    gt_counts["total"] = int(sum(len(bs) for bs in ground_truth))
    det_counts = {s: 0 for s in _STRATA}
    for bs in detections:
        if len(bs) == 0:
            continue
        st = _area_stratum(bs.areas(), area_bounds)
        for si, name in enumerate(_STRATA):
            det_counts[name] += int((st == si).sum())
    det_counts["total"] = int(sum(len(bs) for bs in detections))

    return EvalResult(
        iou=iou_thresh,
        ap_per_class=ap_per_class,
        mean_ap=mean_ap,
        ap_small=strata_mean["small"],
        ap_medium=strata_mean["medium"],
        ap_large=strata_mean["large"],
        excluded_classes=excluded,
        gt_counts=gt_counts,
        det_counts=det_counts,
    )


def evaluate_coco(
    detections: list[BoxSet],
    ground_truth: list[BoxSet],
    area_bounds: tuple[float, float] = DEFAULT_AREA_BOUNDS,
) -> EvalResult:
    """AP averaged over IoU thresholds 0.5:0.05:0.95 (per class, then mean)."""
    results = [
        evaluate(detections, ground_truth, t, area_bounds) for t in COCO_IOU_THRESHOLDS
    ]
    classes = results[0].ap_per_class.keys()
    ap_per_class = {
        c: float(np.mean([r.ap_per_class[c] for r in results])) for c in classes
    }

    def _avg(vals: list[float | None]) -> float | None:
        present = [v for v in vals if v is not None]
        return float(np.mean(present)) if present else None

    return EvalResult(
        iou="coco",
        ap_per_class=ap_per_class,
        mean_ap=float(np.mean(list(ap_per_class.values()))) if ap_per_class else 0.0,
        ap_small=_avg([r.ap_small for r in results]),
        ap_medium=_avg([r.ap_medium for r in results]),
        ap_large=_avg([r.ap_large for r in results]),
        excluded_classes=results[0].excluded_classes,
        gt_counts=results[0].gt_counts,
        det_counts=results[0].det_counts,
    )
