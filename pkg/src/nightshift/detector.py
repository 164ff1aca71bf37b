"""A minimal two-stage detector: small conv backbone -> RPN -> RoI head.

The design follows standard two-stage conventions at toy scale: a 4-block
convolutional backbone with total stride 4, a region proposal network with
9 anchors per cell (3 scales x 3 aspect ratios), and an RoI head that pools
7x7 features per proposal through two fully connected layers into a (K+1)-way
class distribution (background last) plus a class-agnostic box refinement.

The model doubles as the parameter container: parameters partition into the
named segments "backbone" / "rpn" / "roi" by attribute prefix, numeric
errors name the segment they occurred in, and `flat_param_vector` exposes
the flattened view used by gradient probes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from . import boxes as boxops
from .errors import ConfigError, EmptyProposalsError, NumericError
from .structures import BoxSet, DetectionSet, ImageTensor, LabeledImage, ProposalSet

SEGMENTS = ("backbone", "rpn", "roi")

# largest allowed decoded log-size delta, the usual Faster R-CNN clamp
_MAX_DLOG = math.log(1000.0 / 16)


@dataclass
class DetectorConfig:
    """Architecture and proposal/sampling hyperparameters.

    num_classes counts real classes; the classifier emits num_classes + 1
    logits with background last. All thresholds follow the usual two-stage
    conventions and are exposed here rather than hard-coded.
    """

    num_classes: int = 4
    channels: tuple[int, int, int, int] = (12, 24, 32, 32)
    fc_dim: int = 96
    pool_size: int = 7
    anchor_scales: tuple[float, ...] = (8.0, 16.0, 32.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    pre_nms_topk: int = 600
    proposal_cap: int = 100
    rpn_nms_iou: float = 0.7
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    rpn_sample_size: int = 128
    rpn_pos_fraction: float = 0.5
    roi_fg_iou: float = 0.5
    roi_sample_size: int = 48
    roi_pos_fraction: float = 0.25
    rpn_reg_weight: float = 1.0
    roi_reg_weight: float = 1.0
    min_proposal_size: float = 1.0
    score_thresh: float = 0.05
    test_nms_iou: float = 0.5
    max_detections: int = 100

    @property
    def stride(self) -> int:
        return 4  # two stride-2 blocks

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if len(self.channels) != 4:
            raise ConfigError("backbone expects exactly 4 channel counts")
        for name in ("rpn_nms_iou", "rpn_fg_iou", "rpn_bg_iou", "roi_fg_iou", "test_nms_iou"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"detector.{name} must lie in (0, 1), got {v}")
        if self.rpn_bg_iou >= self.rpn_fg_iou:
            raise ConfigError("rpn_bg_iou must be below rpn_fg_iou")
        if self.proposal_cap < 1 or self.pre_nms_topk < 1:
            raise ConfigError("proposal counts must be >= 1")


class Backbone(nn.Module):
    def __init__(self, channels: tuple[int, int, int, int]):
        super().__init__()
        c0, c1, c2, c3 = channels
        self.conv1 = nn.Conv2d(3, c0, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c1, c2, 3, stride=1, padding=1)
        self.conv4 = nn.Conv2d(c2, c3, 3, stride=1, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.conv3(x))
        return F.relu(self.conv4(x))


class RPNHead(nn.Module):
    def __init__(self, in_channels: int, anchors_per_cell: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.objectness = nn.Conv2d(in_channels, anchors_per_cell, 1)
        self.deltas = nn.Conv2d(in_channels, anchors_per_cell * 4, 1)

    def forward(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # returns flattened (N,) logits and (N, 4) deltas in anchor order
        t = F.relu(self.conv(feat))
        obj = self.objectness(t)
        reg = self.deltas(t)
        n, a, fh, fw = obj.shape
        obj = obj.permute(0, 2, 3, 1).reshape(-1)
        reg = reg.view(n, a, 4, fh, fw).permute(0, 3, 4, 1, 2).reshape(-1, 4)
        return obj, reg


class RoIHead(nn.Module):
    def __init__(self, in_channels: int, pool_size: int, fc_dim: int, num_classes: int):
        super().__init__()
        self.pool_size = pool_size
        self.fc1 = nn.Linear(in_channels * pool_size * pool_size, fc_dim)
        self.fc2 = nn.Linear(fc_dim, fc_dim)
        self.cls = nn.Linear(fc_dim, num_classes + 1)
        self.reg = nn.Linear(fc_dim, 4)

    def forward(
        self, feat: torch.Tensor, rois: torch.Tensor, spatial_scale: float
    ) -> tuple[torch.Tensor, torch.Tensor]:
        pooled = roi_align(
            feat,
            [rois],
            output_size=(self.pool_size, self.pool_size),
            spatial_scale=spatial_scale,
            sampling_ratio=2,
            aligned=True,
        )
        x = pooled.flatten(start_dim=1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.cls(x), self.reg(x)


class TinyDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = Backbone(config.channels)
        self.rpn = RPNHead(config.channels[-1], config.anchors_per_cell)
        self.roi = RoIHead(
            config.channels[-1], config.pool_size, config.fc_dim, config.num_classes
        )

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def build_detector(config: DetectorConfig | None = None, seed: int = 0) -> TinyDetector:
    """Construct a detector with seeded weight initialization."""
    torch.manual_seed(seed)
    return TinyDetector(config or DetectorConfig())


def segment_parameters(model: TinyDetector) -> dict[str, list[tuple[str, nn.Parameter]]]:
    """Parameters grouped by segment prefix (backbone / rpn / roi)."""
    groups: dict[str, list[tuple[str, nn.Parameter]]] = {s: [] for s in SEGMENTS}
    for name, p in model.named_parameters():
        groups[name.split(".", 1)[0]].append((name, p))
    return groups


def flat_param_vector(model: TinyDetector) -> np.ndarray:
    """All parameters concatenated in named_parameters order."""
    return np.concatenate(
        [p.detach().cpu().numpy().ravel() for _, p in model.named_parameters()]
    )


def image_to_tensor(image: ImageTensor, dtype: torch.dtype) -> torch.Tensor:
    arr = np.ascontiguousarray(image.pixels.transpose(2, 0, 1))
    return torch.from_numpy(arr).to(dtype).unsqueeze(0)


def _check_finite(t: torch.Tensor, segment: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations in the {segment} segment")


_ANCHOR_CACHE: dict[tuple, torch.Tensor] = {}


def generate_anchors(
    fh: int, fw: int, cfg: DetectorConfig, dtype: torch.dtype
) -> torch.Tensor:
    """Anchor boxes for a feature map, ordered (row, col, anchor)."""
    key = (fh, fw, cfg.stride, cfg.anchor_scales, cfg.anchor_ratios, dtype)
    hit = _ANCHOR_CACHE.get(key)
    if hit is not None:
        return hit
    base = []
    for scale in cfg.anchor_scales:
        for ratio in cfg.anchor_ratios:
            h = scale * math.sqrt(ratio)
            w = scale / math.sqrt(ratio)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
    base_t = torch.tensor(base, dtype=dtype)  # (A, 4)
    ys = (torch.arange(fh, dtype=dtype) + 0.5) * cfg.stride
    xs = (torch.arange(fw, dtype=dtype) + 0.5) * cfg.stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    shifts = torch.stack([cx, cy, cx, cy], dim=-1).reshape(-1, 4)  # (fh*fw, 4)
    anchors = (shifts[:, None, :] + base_t[None, :, :]).reshape(-1, 4)
    _ANCHOR_CACHE[key] = anchors
    return anchors


def encode_boxes(ref: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Regression targets (dx, dy, dw, dh) that move `ref` onto `target`."""
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack(
        [(tx - rx) / rw, (ty - ry) / rh, torch.log(tw / rw), torch.log(th / rh)],
        dim=1,
    )


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    rx = ref[:, 0] + 0.5 * rw
    ry = ref[:, 1] + 0.5 * rh
    dx, dy, dw, dh = deltas.unbind(dim=1)
    dw = dw.clamp(max=_MAX_DLOG)
    dh = dh.clamp(max=_MAX_DLOG)
    cx = rx + dx * rw
    cy = ry + dy * rh
    w = rw * torch.exp(dw)
    h = rh * torch.exp(dh)
    return torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1
    )


def box_iou_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(N, M) IoU matrix between two xyxy tensors."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    x1 = torch.maximum(a[:, None, 0], b[None, :, 0])
    y1 = torch.maximum(a[:, None, 1], b[None, :, 1])
    x2 = torch.minimum(a[:, None, 2], b[None, :, 2])
    y2 = torch.minimum(a[:, None, 3], b[None, :, 3])
    inter = (x2 - x1).clamp(min=0) * (y2 - y1).clamp(min=0)
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def assign_to_boxes(
    candidates: torch.Tensor,
    gt: torch.Tensor,
    fg_iou: float,
    bg_iou: float,
    force_best_per_gt: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Label candidates 1 (foreground) / 0 (background) / -1 (ignored).

    Foreground at IoU >= fg_iou, background at IoU <= bg_iou, ignored in
    between. With force_best_per_gt, the best-overlapping candidate of each
    ground-truth box is foreground regardless of threshold, so no target is
    left unclaimed. Returns (labels, matched_gt_index).
    """
    n = candidates.shape[0]
    labels = torch.full((n,), -1, dtype=torch.int64)
    matched = torch.zeros((n,), dtype=torch.int64)
    if gt.shape[0] == 0:
        labels.fill_(0)
        return labels, matched
    iou = box_iou_t(candidates, gt)
    max_iou, argmax = iou.max(dim=1)
    matched = argmax
    labels[max_iou <= bg_iou] = 0
    labels[max_iou >= fg_iou] = 1
    if force_best_per_gt:
        per_gt_best = iou.max(dim=0).values  # (M,)
        is_best = (iou >= (per_gt_best[None, :] - 1e-6)) & (iou > 0)
        rows = is_best.any(dim=1)
        labels[rows] = 1
        matched[rows] = is_best.to(torch.float32).argmax(dim=1)[rows]
    return labels, matched


def sample_balanced(
    labels: torch.Tensor,
    size: int,
    pos_fraction: float,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Pick up to `size` indices with at most pos_fraction foreground.

    Without a generator the lowest indices are taken, which keeps pure-
    function callers (finite-difference probes) deterministic.
    """
    pos = torch.nonzero(labels == 1).flatten()
    neg = torch.nonzero(labels == 0).flatten()
    n_pos = min(pos.numel(), int(round(size * pos_fraction)))
    n_neg = min(neg.numel(), size - n_pos)
    if generator is not None:
        if pos.numel() > n_pos:
            pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
        else:
            pos = pos[:n_pos]
        if neg.numel() > n_neg:
            neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
        else:
            neg = neg[:n_neg]
    else:
        pos = pos[:n_pos]
        neg = neg[:n_neg]
    return pos, neg


def _propose_from_outputs(
    anchors: torch.Tensor,
    obj_logits: torch.Tensor,
    deltas: torch.Tensor,
    height: int,
    width: int,
    cfg: DetectorConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, filter, pre-NMS top-k, NMS, cap. Detached throughout."""
    with torch.no_grad():
        obj = obj_logits.detach()
        boxes_t = decode_boxes(anchors, deltas.detach())
        order = torch.argsort(obj, descending=True, stable=True)
        order = order[: cfg.pre_nms_topk]
        boxes_np = boxes_t[order].cpu().numpy().astype(np.float32)
        scores_np = torch.sigmoid(obj[order]).cpu().numpy().astype(np.float32)
    boxes_np = boxops.clip_to_image(boxes_np, height, width)
    w = boxes_np[:, 2] - boxes_np[:, 0]
    h = boxes_np[:, 3] - boxes_np[:, 1]
    keep = (w >= cfg.min_proposal_size) & (h >= cfg.min_proposal_size)
    boxes_np, scores_np = boxes_np[keep], scores_np[keep]
    if boxes_np.shape[0]:
        keep_idx = boxops.nms(boxes_np, scores_np, cfg.rpn_nms_iou)[: cfg.proposal_cap]
        boxes_np, scores_np = boxes_np[keep_idx], scores_np[keep_idx]
    return boxes_np, scores_np


def rpn_propose(model: TinyDetector, image: ImageTensor) -> ProposalSet:
    """Generate up to proposal_cap region proposals for one image.

    Proposals are sorted by descending objectness, clipped to the image,
    and detached from the graph; the proposal boxes themselves are never
    differentiated through.
    """
    cfg = model.config
    with torch.no_grad():
        x = image_to_tensor(image, model.dtype)
        feat = model.backbone(x)
        _check_finite(feat, "backbone")
        obj, reg = model.rpn(feat)
        _check_finite(obj, "rpn")
        _check_finite(reg, "rpn")
        anchors = generate_anchors(feat.shape[2], feat.shape[3], cfg, feat.dtype)
        boxes_np, scores_np = _propose_from_outputs(
            anchors, obj, reg, image.height, image.width, cfg
        )
    return ProposalSet(xyxy=boxes_np, objectness=scores_np, frame=image.frame)


def roi_predict(
    model: TinyDetector, image: ImageTensor, proposals: ProposalSet
) -> DetectionSet:
    """Classify and refine the supplied proposals, index-aligned.

    Output row n is the prediction for proposal n: a (K+1)-way softmax
    distribution and a refined box. Gradients flow to the model parameters
    (callers wrap in no_grad for the teacher path).
    """
    if len(proposals) == 0:
        raise EmptyProposalsError("roi_predict requires at least one proposal")
    cfg = model.config
    x = image_to_tensor(image, model.dtype)
    feat = model.backbone(x)
    _check_finite(feat, "backbone")
    rois = torch.from_numpy(np.asarray(proposals.xyxy, dtype=np.float32)).to(model.dtype)
    cls_logits, deltas = model.roi(feat, rois, 1.0 / cfg.stride)
    _check_finite(cls_logits, "roi")
    _check_finite(deltas, "roi")
    dist = F.softmax(cls_logits, dim=1)
    refined = decode_boxes(rois, deltas)
    x1 = refined[:, 0].clamp(0, image.width - 0.01)
    y1 = refined[:, 1].clamp(0, image.height - 0.01)
    # clamping keeps every box strictly positive so index alignment survives
    x2 = torch.maximum(refined[:, 2].clamp(0, image.width), x1 + 0.01)
    y2 = torch.maximum(refined[:, 3].clamp(0, image.height), y1 + 0.01)
    refined = torch.stack([x1, y1, x2, y2], dim=1)
    return DetectionSet(xyxy=refined, class_dist=dist, frame=image.frame)


def rpn_objectness_loss(
    model: TinyDetector,
    image: ImageTensor,
    target_xyxy: np.ndarray,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Objectness-only RPN loss against a set of target boxes.

    Shared by the supervised RPN loss and the unsupervised branch (where
    the targets are pseudo-label boxes and no regression term exists).
    """
    cfg = model.config
    x = image_to_tensor(image, model.dtype)
    feat = model.backbone(x)
    _check_finite(feat, "backbone")
    obj, _ = model.rpn(feat)
    _check_finite(obj, "rpn")
    anchors = generate_anchors(feat.shape[2], feat.shape[3], cfg, feat.dtype)
    gt = torch.from_numpy(np.asarray(target_xyxy, np.float32).reshape(-1, 4)).to(feat.dtype)
    labels, _ = assign_to_boxes(
        anchors, gt, cfg.rpn_fg_iou, cfg.rpn_bg_iou, force_best_per_gt=True
    )
    pos, neg = sample_balanced(
        labels, cfg.rpn_sample_size, cfg.rpn_pos_fraction, generator
    )
    sampled = torch.cat([pos, neg])
    tgt = (labels[sampled] == 1).to(obj.dtype)
    return F.binary_cross_entropy_with_logits(obj[sampled], tgt)


def supervised_loss(
    model: TinyDetector,
    sample: LabeledImage,
    generator: torch.Generator | None = None,
    fixed_rois: np.ndarray | None = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Full supervised loss: RPN (objectness + box) and RoI (class + box).

    Returns the scalar loss with its graph plus a breakdown whose regression
    entries are already multiplied by their configured weights, so the
    breakdown sums to the total. Zero ground-truth boxes are legal: every
    anchor and proposal trains toward background and the regression terms
    are zero.

    `fixed_rois` pins the RoI branch to a caller-supplied (N, 4) box array
    instead of regenerating proposals from the live RPN. Proposal boxes are
    inputs to the RoI head, never differentiated through, so gradient
    probes pass a frozen set to evaluate the loss the graph actually
    differentiates.
    """
    cfg = model.config
    x = image_to_tensor(sample.image, model.dtype)
    feat = model.backbone(x)
    _check_finite(feat, "backbone")
    obj, reg = model.rpn(feat)
    _check_finite(obj, "rpn")
    _check_finite(reg, "rpn")
    anchors = generate_anchors(feat.shape[2], feat.shape[3], cfg, feat.dtype)
    gt = torch.from_numpy(sample.boxes.xyxy.reshape(-1, 4)).to(feat.dtype)
    gt_classes = torch.from_numpy(
        np.asarray(sample.boxes.class_ids, np.int64).reshape(-1)
    )

    # --- RPN: objectness on a balanced sample, regression on its positives
    labels, matched = assign_to_boxes(
        anchors, gt, cfg.rpn_fg_iou, cfg.rpn_bg_iou, force_best_per_gt=True
    )
    pos, neg = sample_balanced(
        labels, cfg.rpn_sample_size, cfg.rpn_pos_fraction, generator
    )
    sampled = torch.cat([pos, neg])
    obj_target = (labels[sampled] == 1).to(obj.dtype)
    rpn_obj = F.binary_cross_entropy_with_logits(obj[sampled], obj_target)
    if pos.numel():
        reg_target = encode_boxes(anchors[pos], gt[matched[pos]])
        rpn_reg_raw = F.smooth_l1_loss(
            reg[pos], reg_target, beta=1.0 / 9, reduction="sum"
        ) / max(sampled.numel(), 1)
    else:
        rpn_reg_raw = obj.sum() * 0.0

    # --- RoI: proposals from the detached RPN outputs plus the GT boxes
    if fixed_rois is not None:
        rois_np = np.asarray(fixed_rois, np.float32).reshape(-1, 4)
    else:
        boxes_np, _ = _propose_from_outputs(
            anchors, obj, reg, sample.image.height, sample.image.width, cfg
        )
        rois_np = (
            np.concatenate([boxes_np, sample.boxes.xyxy], axis=0)
            if len(sample.boxes)
            else boxes_np
        )
    if rois_np.shape[0] == 0:
        # no proposals and no ground truth: train on one full-image background roi
        rois_np = np.array(
            [[0.0, 0.0, sample.image.width, sample.image.height]], np.float32
        )
    rois = torch.from_numpy(rois_np.astype(np.float32)).to(feat.dtype)
    roi_labels, roi_matched = assign_to_boxes(
        rois, gt, cfg.roi_fg_iou, cfg.roi_fg_iou - 1e-6, force_best_per_gt=False
    )
    rpos, rneg = sample_balanced(
        roi_labels, cfg.roi_sample_size, cfg.roi_pos_fraction, generator
    )
    rsampled = torch.cat([rpos, rneg])
    cls_target = torch.full(
        (rsampled.numel(),), cfg.num_classes, dtype=torch.int64
    )
    cls_target[: rpos.numel()] = gt_classes[roi_matched[rpos]]
    cls_logits, roi_deltas = model.roi(feat, rois[rsampled], 1.0 / cfg.stride)
    _check_finite(cls_logits, "roi")
    roi_cls = F.cross_entropy(cls_logits, cls_target)
    if rpos.numel():
        roi_reg_target = encode_boxes(rois[rpos], gt[roi_matched[rpos]])
        roi_reg_raw = F.smooth_l1_loss(
            roi_deltas[: rpos.numel()], roi_reg_target, beta=1.0, reduction="sum"
        ) / max(rsampled.numel(), 1)
    else:
        roi_reg_raw = roi_deltas.sum() * 0.0

    rpn_reg = cfg.rpn_reg_weight * rpn_reg_raw
    roi_reg = cfg.roi_reg_weight * roi_reg_raw
    total = rpn_obj + rpn_reg + roi_cls + roi_reg
    if not torch.isfinite(total):
        raise NumericError("supervised loss is non-finite")
    breakdown = {
        "rpn_obj": float(rpn_obj.detach()),
        "rpn_reg": float(rpn_reg.detach()),
        "roi_cls": float(roi_cls.detach()),
        "roi_reg": float(roi_reg.detach()),
        "total": float(total.detach()),
    }
    return total, breakdown


def detect(
    model: TinyDetector,
    image: ImageTensor,
    score_thresh: float | None = None,
    nms_iou: float | None = None,
    max_detections: int | None = None,
) -> BoxSet:
    """Full inference for one image: propose, classify, NMS, cap.

    Scores are the max class probability excluding background. Returns a
    BoxSet with class_ids, class_dist and scores, sorted by descending
    score.
    """
    cfg = model.config
    score_thresh = cfg.score_thresh if score_thresh is None else score_thresh
    nms_iou = cfg.test_nms_iou if nms_iou is None else nms_iou
    max_detections = cfg.max_detections if max_detections is None else max_detections
    with torch.no_grad():
        proposals = rpn_propose(model, image)
        if len(proposals) == 0:
            return BoxSet.empty(num_classes=cfg.num_classes, frame=image.frame)
        dets = roi_predict(model, image, proposals).to_boxset()
    keep = dets.scores >= score_thresh
    dets = dets.select(keep)
    # refinement can collapse a box to zero width at the image border
    w = dets.xyxy[:, 2] - dets.xyxy[:, 0]
    h = dets.xyxy[:, 3] - dets.xyxy[:, 1]
    dets = dets.select((w > 0) & (h > 0))
    if len(dets) == 0:
        return BoxSet.empty(num_classes=cfg.num_classes, frame=image.frame)
    keep_idx = boxops.class_aware_nms(dets.xyxy, dets.scores, dets.class_ids, nms_iou)
    return dets.select(keep_idx[:max_detections])
