"""Scheduled down-scaling of student inputs (the teacher stays full-scale).

Late in training the student is fed shrunken copies of the target image so
it must recognize objects at smaller apparent sizes; the accompanying
pseudo-labels shrink with the image and boxes whose scaled area falls below
a floor are removed (too few pixels left to learn from). A step schedule
over training progress sets the mean scale and each draw perturbs it with
clipped Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError
from .pseudolabel import PseudoLabelSet
from .structures import BoxSet, Frame, ImageTensor, ProposalSet, require_same_frame


@dataclass
class ScaleSchedule:
    """Step schedule: milestone k raises the mean scale to scales[k+1].

    Before the first milestone the mean is scales[0]. Progress is the
    fraction of total training iterations completed.
    """

    milestones: tuple[float, ...] = (0.57, 0.64, 0.71, 0.78, 0.85, 0.92)
    scales: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    gaussian_sigma: float = 0.05
    min_scale: float = 0.4
    min_box_area: float = 96.0

    def validate(self) -> None:
        if not self.scales:
            raise ConfigError("scale schedule needs at least one scale")
        if len(self.scales) != len(self.milestones):
            raise ConfigError(
                "scale schedule needs one scale per milestone, got "
                f"{len(self.scales)} scales for {len(self.milestones)} milestones"
            )
        if any(not 0.0 <= m <= 1.0 for m in self.milestones):
            raise ConfigError(f"milestones must lie in [0, 1]: {self.milestones}")
        if list(self.milestones) != sorted(self.milestones):
            raise ConfigError(f"milestones must be ascending: {self.milestones}")
        if any(not 0.0 < s <= 1.0 for s in self.scales):
            raise ConfigError(f"scales must lie in (0, 1]: {self.scales}")
        if not 0.0 < self.min_scale <= 1.0:
            raise ConfigError(f"min_scale must lie in (0, 1]: {self.min_scale}")
        if self.gaussian_sigma < 0:
            raise ConfigError(f"gaussian_sigma must be >= 0: {self.gaussian_sigma}")
        if self.min_box_area < 0:
            raise ConfigError(f"min_box_area must be >= 0: {self.min_box_area}")


@dataclass
class ScaledView:
    """A resized copy of an image, tagged with the frame its boxes live in."""

    image: ImageTensor
    scale_factor: float
    frame: Frame


def schedule_norm(progress: float, sched: ScaleSchedule) -> float:
    """Mean scale at a given training progress in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    passed = sum(1 for m in sched.milestones if m <= progress)
    return sched.scales[min(passed, len(sched.scales) - 1)]


def sample_scale(
    norm: float,
    sigma: float,
    rng: np.random.Generator,
    min_scale: float = 0.4,
) -> float:
    """One scale draw: Gaussian around the scheduled mean, clipped to [min_scale, 1]."""
    s = float(rng.normal(norm, sigma))
    return float(min(max(s, min_scale), 1.0))


def map_xyxy(xyxy: np.ndarray, from_frame: Frame, to_frame: Frame) -> np.ndarray:
    if from_frame.image_id != to_frame.image_id:
        from .structures import FrameMismatchError

        raise FrameMismatchError(
            f"cannot map boxes between different images: "
            f"{from_frame.image_id!r} vs {to_frame.image_id!r}"
        )
    ratio = np.float32(to_frame.scale / from_frame.scale)
    return np.asarray(xyxy, dtype=np.float32) * ratio


def map_boxes(boxes: BoxSet, from_frame: Frame, to_frame: Frame) -> BoxSet:
    """Rescale box coordinates between two frames of the same image."""
    if boxes.frame is not None:
        require_same_frame(boxes.frame, from_frame, "map_boxes")
    out = boxes.select(np.arange(len(boxes)))
    out.xyxy = map_xyxy(boxes.xyxy, from_frame, to_frame)
    out.frame = to_frame
    return out


def map_proposals(props: ProposalSet, to_frame: Frame) -> ProposalSet:
    return ProposalSet(
        xyxy=map_xyxy(props.xyxy, props.frame, to_frame),
        objectness=props.objectness,
        frame=to_frame,
    )


def scaled_area_keep_mask(
    xyxy: np.ndarray, scale: float, min_box_area: float
) -> np.ndarray:
    """Mask of boxes whose area AFTER scaling by `scale` stays >= the floor."""
    xyxy = np.asarray(xyxy, dtype=np.float32).reshape(-1, 4)
    w = (xyxy[:, 2] - xyxy[:, 0]) * scale
    h = (xyxy[:, 3] - xyxy[:, 1]) * scale
    return (w * h) >= min_box_area


def scale_inputs(
    image: ImageTensor,
    pseudo: PseudoLabelSet,
    scale: float,
    min_box_area: float,
) -> tuple[ScaledView, PseudoLabelSet]:
    """Resize an image and its pseudo-labels to `scale`, dropping tiny boxes.

    Scaled dimensions are round(dim * scale); boxes scale by the same factor
    and any box whose scaled area falls below min_box_area is removed. The
    returned view carries a new frame whose scale is relative to full size.
    """
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    require_same_frame(image.frame, pseudo.frame, "scale_inputs")

    h, w = image.height, image.width
    new_w = max(int(np.floor(w * scale + 0.5)), 1)
    new_h = max(int(np.floor(h * scale + 0.5)), 1)
    frame = Frame(image.frame.image_id, image.frame.scale * scale)

    if scale == 1.0:
        pixels = image.pixels.copy()
    else:
        pixels = cv2.resize(image.pixels, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    view = ScaledView(
        image=ImageTensor(np.clip(pixels, 0.0, 1.0), frame),
        scale_factor=scale,
        frame=frame,
    )

    keep = scaled_area_keep_mask(pseudo.labels.xyxy, scale, min_box_area)
    kept = pseudo.labels.select(keep)
    scaled_xyxy = map_xyxy(kept.xyxy, image.frame, frame)
    # clamp to the resized canvas; rounding of the canvas can differ from
    # box scaling by a fraction of a pixel
    scaled_xyxy[:, 0::2] = np.clip(scaled_xyxy[:, 0::2], 0, new_w)
    scaled_xyxy[:, 1::2] = np.clip(scaled_xyxy[:, 1::2], 0, new_h)
    labels = BoxSet(
        xyxy=scaled_xyxy,
        class_ids=kept.class_ids,
        class_dist=kept.class_dist,
        scores=kept.scores,
        frame=frame,
    )
    scaled_pseudo = PseudoLabelSet(
        labels=labels,
        source_image_id=pseudo.source_image_id,
        teacher_iteration=pseudo.teacher_iteration,
        frame=frame,
    )
    return view, scaled_pseudo
