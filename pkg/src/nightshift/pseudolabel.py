"""Phase one of target-domain training: high-confidence teacher labels.

The teacher runs on the full-scale night image; its per-proposal class
distributions are reduced to hard labels (argmax over real classes) with a
confidence score (max over real classes, background excluded). Per-class
NMS removes duplicates first, then a confidence threshold keeps only
predictions the teacher is sure about. An empty result is legal and simply
means this image contributes nothing this iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

from .boxes import class_aware_nms
from .errors import ConfigError
from .structures import BoxSet, Frame, ImageTensor


@dataclass
class FilterConfig:
    """Confidence threshold tau and the NMS IoU used before it."""

    tau: float = 0.8
    nms_iou: float = 0.5

    def validate(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError(f"nms_iou must lie in (0, 1), got {self.nms_iou}")


@dataclass
class PseudoLabelSet:
    """Filtered teacher predictions for one image.

    labels carries boxes, hard class ids, full class distributions, and
    confidence scores; every score is >= the filter threshold.
    """

    labels: BoxSet
    source_image_id: str
    teacher_iteration: int
    frame: Frame

    def __len__(self) -> int:
        return len(self.labels)


def filter_detections(dets: BoxSet, cfg: FilterConfig) -> BoxSet:
    """Per-class NMS, then confidence thresholding (in that order).

    Both the two-phase path and the hard-label baseline build their
    pseudo-labels through this function, so the phase-one filter is a single
    piece of code.
    """
    if len(dets) == 0:
        return dets
    if dets.scores is None or dets.class_ids is None:
        raise ValueError("detections need scores and class ids to be filtered")
    keep = class_aware_nms(dets.xyxy, dets.scores, dets.class_ids, cfg.nms_iou)
    kept = dets.select(keep)
    return kept.select(kept.scores >= cfg.tau)


def generate_pseudo_labels(
    teacher,
    image: ImageTensor,
    cfg: FilterConfig | None = None,
    iteration: int = 0,
) -> PseudoLabelSet:
    """Run the teacher on one image and keep its confident predictions."""
    import torch

    from .detector import roi_predict, rpn_propose

    cfg = cfg or FilterConfig()
    with torch.no_grad():
        proposals = rpn_propose(teacher, image)
        if len(proposals) == 0:
            labels = BoxSet.empty(num_classes=teacher.num_classes, frame=image.frame)
        else:
            dets = roi_predict(teacher, image, proposals).to_boxset()
            labels = filter_detections(dets, cfg)
    return PseudoLabelSet(
        labels=labels,
        source_image_id=image.frame.image_id,
        teacher_iteration=iteration,
        frame=image.frame,
    )
