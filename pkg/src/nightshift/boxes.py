"""Box geometry utilities (numpy, xyxy convention)."""

from __future__ import annotations

import numpy as np


def area(xyxy: np.ndarray) -> np.ndarray:
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    return np.clip(xyxy[:, 2] - xyxy[:, 0], 0, None) * np.clip(
        xyxy[:, 3] - xyxy[:, 1], 0, None
    )


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) boxes -> (N, M) float64."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(xyxy: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy NMS. Returns kept indices in descending score order.

    Deterministic: score ties break toward the lower original index
    (stable sort), so repeated runs keep identical boxes.
    """
    xyxy = np.asarray(xyxy, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[pos]:
            continue
        keep.append(int(i))
        rest = order[pos + 1 :]
        live = ~suppressed[pos + 1 :]
        if rest.size:
            ious = iou_matrix(xyxy[i : i + 1], xyxy[rest[live]])[0]
            mask = np.zeros(rest.size, dtype=bool)
            mask[np.flatnonzero(live)[ious > iou_thresh]] = True
            suppressed[pos + 1 :] |= mask
    return np.asarray(keep, dtype=np.int64)


def class_aware_nms(
    xyxy: np.ndarray,
    scores: np.ndarray,
    class_ids: np.ndarray,
    iou_thresh: float,
) -> np.ndarray:
    """Per-class NMS; boxes of different classes never suppress each other.

    Returns kept indices sorted by descending score (index tie-break).
    """
    class_ids = np.asarray(class_ids).reshape(-1)
    keep_all = []
    for c in np.unique(class_ids):
        idx = np.flatnonzero(class_ids == c)
        kept = nms(xyxy[idx], scores[idx], iou_thresh)
        keep_all.extend(idx[kept].tolist())
    keep_all = np.asarray(sorted(keep_all), dtype=np.int64)
    if keep_all.size == 0:
        return keep_all
    order = np.argsort(-np.asarray(scores)[keep_all], kind="stable")
    return keep_all[order]


def clip_to_image(xyxy: np.ndarray, height: int, width: int) -> np.ndarray:
    out = np.asarray(xyxy, dtype=np.float32).reshape(-1, 4).copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out
