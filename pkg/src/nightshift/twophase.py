"""Phase two: merged proposals, matched predictions, weighted consistency.

Phase one (pseudolabel module) gives high-confidence teacher boxes B_p for a
night image. Phase two appends those boxes to the student's own region
proposals, runs BOTH models' RoI heads over the merged list, and penalizes
the student for disagreeing with the teacher on every matched entry via a
confidence-weighted KL divergence. Because the lists are index-aligned by
construction, entry n of the student and teacher outputs always describe the
same region; no bipartite matching step exists to get wrong.

The unsupervised objective is the RPN objectness loss (anchors assigned
against the pseudo-boxes) plus the consistency loss. Neither branch trains
box regression: pseudo-box coordinates are treated as too noisy to regress
toward, so they only steer objectness and classification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .detector import (
    TinyDetector,
    assign_to_boxes,
    roi_predict,
    rpn_objectness_loss,
    rpn_propose,
    sample_balanced,
)
from .errors import SkipBatch
from .pseudolabel import PseudoLabelSet
from .scaling import map_proposals
from .structures import (
    DetectionSet,
    ImageTensor,
    ProposalSet,
    require_same_frame,
)

# probability floor applied inside logarithms
EPS = 1e-8


@dataclass
class MatchedPredictions:
    """Index-aligned student and teacher predictions over merged proposals."""

    proposals: ProposalSet
    student: DetectionSet
    teacher: DetectionSet

    def __post_init__(self) -> None:
        if not (len(self.proposals) == len(self.student) == len(self.teacher)):
            raise ValueError(
                "matched predictions must be index-aligned: "
                f"{len(self.proposals)} proposals, {len(self.student)} student, "
                f"{len(self.teacher)} teacher"
            )

    def __len__(self) -> int:
        return len(self.proposals)


def merge_proposals(student_rpn: ProposalSet, pseudo: PseudoLabelSet) -> ProposalSet:
    """Concatenate student RPN proposals with pseudo-boxes, in that order.

    Nothing is deduplicated, re-scored, or capped: the proposal cap applies
    to the RPN output before merging, never after. Pseudo entries keep their
    confidence scores in the objectness slot.
    """
    require_same_frame(student_rpn.frame, pseudo.frame, "merge_proposals")
    return ProposalSet(
        xyxy=np.concatenate([student_rpn.xyxy, pseudo.labels.xyxy], axis=0),
        objectness=np.concatenate(
            [
                student_rpn.objectness,
                np.zeros((len(pseudo),), np.float32)
                if pseudo.labels.scores is None
                else pseudo.labels.scores,
            ]
        ),
        frame=student_rpn.frame,
    )


def matched_predict(
    student: TinyDetector,
    teacher: TinyDetector,
    image_student: ImageTensor,
    image_teacher: ImageTensor,
    merged: ProposalSet,
) -> MatchedPredictions:
    """Run both RoI heads over the merged proposals, index-aligned.

    `merged` lives in the teacher's (full-scale) frame; the student may see
    a scaled view, so the proposals are mapped into the student frame before
    its forward pass. The teacher pass runs without gradients: the teacher
    is only ever updated by EMA.
    """
    if len(merged) == 0:
        raise SkipBatch("merged proposal set is empty")
    require_same_frame(merged.frame, image_teacher.frame, "matched_predict(teacher)")
    student_props = map_proposals(merged, image_student.frame)
    student_dets = roi_predict(student, image_student, student_props)
    with torch.no_grad():
        teacher_dets = roi_predict(teacher, image_teacher, merged)
    return MatchedPredictions(
        proposals=merged, student=student_dets, teacher=teacher_dets
    )


def consistency_loss(m: MatchedPredictions) -> tuple[torch.Tensor, torch.Tensor]:
    """Confidence-weighted KL divergence, teacher as the target.

    For each matched entry n with teacher distribution t and student
    distribution s, the contribution is alpha_n * sum_c t_c ln(t_c / s_c)
    where alpha_n = max_c t_c. Probabilities are floored at EPS inside the
    logs; the mean over entries is returned together with the (detached)
    per-entry weights.
    """
    t = m.teacher.class_dist.detach()
    s = m.student.class_dist
    alpha = t.max(dim=1).values
    kl = (t * (torch.log(t.clamp(min=EPS)) - torch.log(s.clamp(min=EPS)))).sum(dim=1)
    return (alpha * kl).mean(), alpha


def unsupervised_loss(
    student: TinyDetector,
    m: MatchedPredictions,
    pseudo: PseudoLabelSet,
    image_student: ImageTensor,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Target-domain loss: RPN objectness against pseudo-boxes + consistency.

    The pseudo-label set must be expressed in the student view's frame (the
    caller scales boxes along with the image). Raises SkipBatch when there
    are no pseudo-labels, in which case the iteration trains on the
    supervised loss alone.
    """
    if len(pseudo) == 0:
        raise SkipBatch("no pseudo-labels for this image")
    require_same_frame(pseudo.frame, image_student.frame, "unsupervised_loss")
    l_obj = rpn_objectness_loss(student, image_student, pseudo.labels.xyxy, generator)
    l_cons, alpha = consistency_loss(m)
    total = l_obj + l_cons
    parts = {
        "rpn_obj": float(l_obj.detach()),
        "cons": float(l_cons.detach()),
        "alpha_mean": float(alpha.mean()),
        "pseudo_count": float(len(pseudo)),
        "total": float(total.detach()),
    }
    return total, parts


def hard_label_loss(
    student: TinyDetector,
    pseudo: PseudoLabelSet,
    image_student: ImageTensor,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Plain teacher-student baseline: cross-entropy on hard pseudo-labels.

    This is the ablation counterpart of the two-phase path. It consumes the
    SAME phase-one pseudo-labels (same NMS + threshold filter) but treats
    them as ground truth: student proposals are assigned to pseudo-boxes and
    classified with hard cross-entropy instead of matched soft consistency.
    Confidently wrong pseudo-labels therefore push full-strength gradients.
    """
    if len(pseudo) == 0:
        raise SkipBatch("no pseudo-labels for this image")
    require_same_frame(pseudo.frame, image_student.frame, "hard_label_loss")
    cfg = student.config
    l_obj = rpn_objectness_loss(student, image_student, pseudo.labels.xyxy, generator)

    props = rpn_propose(student, image_student)
    rois_np = np.concatenate([props.xyxy, pseudo.labels.xyxy], axis=0)
    from .detector import image_to_tensor  # local import keeps module surface tidy

    x = image_to_tensor(image_student, student.dtype)
    feat = student.backbone(x)
    rois = torch.from_numpy(rois_np.astype(np.float32)).to(student.dtype)
    gt = torch.from_numpy(pseudo.labels.xyxy.astype(np.float32)).to(student.dtype)
    labels, matched = assign_to_boxes(
        rois, gt, cfg.roi_fg_iou, cfg.roi_fg_iou - 1e-6, force_best_per_gt=False
    )
    pos, neg = sample_balanced(
        labels, cfg.roi_sample_size, cfg.roi_pos_fraction, generator
    )
    sampled = torch.cat([pos, neg])
    target = torch.full((sampled.numel(),), cfg.num_classes, dtype=torch.int64)
    pseudo_classes = torch.from_numpy(pseudo.labels.class_ids)
    target[: pos.numel()] = pseudo_classes[matched[pos]]
    cls_logits, _ = student.roi(feat, rois[sampled], 1.0 / cfg.stride)
    l_cls = F.cross_entropy(cls_logits, target)

    total = l_obj + l_cls
    parts = {
        "rpn_obj": float(l_obj.detach()),
        "cons": float(l_cls.detach()),
        "alpha_mean": 1.0,
        "pseudo_count": float(len(pseudo)),
        "total": float(total.detach()),
    }
    return total, parts
