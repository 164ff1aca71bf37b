"""Shared data containers for the training pipeline.

Images are float32 (H, W, 3) arrays in [0, 1]. Boxes are (x1, y1, x2, y2)
pixel coordinates with x2 > x1 and y2 > y1. Anything that can cross a
resolution boundary (proposals, pseudo-labels, detections) carries a Frame
tag so mismatched coordinate frames fail loudly instead of silently
corrupting training targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

SCALE_TOL = 1e-9


class FrameMismatchError(ValueError):
    """Two containers tagged with incompatible coordinate frames were combined."""


@dataclass(frozen=True)
class Frame:
    """A coordinate frame: which image, and at what scale relative to full size.

    scale == 1.0 is the full-resolution frame; a frame with scale 0.5 means
    coordinates live on an image resized to half the full resolution.
    """

    image_id: str
    scale: float = 1.0

    def compatible(self, other: "Frame") -> bool:
        return (
            self.image_id == other.image_id
            and abs(self.scale - other.scale) <= SCALE_TOL
        )


def require_same_frame(a: Frame, b: Frame, context: str) -> None:
    if not a.compatible(b):
        raise FrameMismatchError(
            f"{context}: frame {a} is not compatible with frame {b}"
        )


@dataclass
class ImageTensor:
    """A single image plus its frame tag.

    pixels: (H, W, 3) float32 in [0, 1]. Minimum side length is 32 px, which
    keeps the detector's stride-4 feature map at 8x8 or larger.
    """

    pixels: np.ndarray
    frame: Frame

    def __post_init__(self) -> None:
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {px.shape}")
        if px.dtype != np.float32:
            raise ValueError(f"image must be float32, got {px.dtype}")
        if px.shape[0] < 32 or px.shape[1] < 32:
            raise ValueError(f"image sides must be >= 32 px, got {px.shape[:2]}")
        lo = float(px.min(initial=0.0))
        hi = float(px.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values must lie in [0, 1], got [{lo}, {hi}]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def new_like(self, pixels: np.ndarray) -> "ImageTensor":
        return ImageTensor(pixels=pixels, frame=self.frame)


def _as_f32(a, shape_tail) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float32)
    if arr.ndim != len(shape_tail) + 1 or arr.shape[1:] != tuple(shape_tail):
        raise ValueError(f"expected (N, {shape_tail}) array, got {arr.shape}")
    return arr


@dataclass
class BoxSet:
    """A set of boxes with optional per-box class ids, distributions and scores.

    xyxy: (N, 4) float32. class_ids: (N,) int64 or None. class_dist:
    (N, K+1) float32 rows on the probability simplex (background last) or
    None. scores: (N,) float32 in [0, 1] or None.
    """

    xyxy: np.ndarray
    class_ids: np.ndarray | None = None
    class_dist: np.ndarray | None = None
    scores: np.ndarray | None = None
    frame: Frame | None = None

    def __post_init__(self) -> None:
        self.xyxy = np.asarray(self.xyxy, dtype=np.float32).reshape(-1, 4)
        n = self.xyxy.shape[0]
        if n:
            w = self.xyxy[:, 2] - self.xyxy[:, 0]
            h = self.xyxy[:, 3] - self.xyxy[:, 1]
            if (w <= 0).any() or (h <= 0).any():
                bad = int(np.argmax((w <= 0) | (h <= 0)))
                raise ValueError(f"degenerate box at index {bad}: {self.xyxy[bad]}")
        if self.class_ids is not None:
            self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
            if self.class_ids.shape[0] != n:
                raise ValueError("class_ids length does not match boxes")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float32).reshape(-1)
            if self.scores.shape[0] != n:
                raise ValueError("scores length does not match boxes")
        if self.class_dist is not None:
            self.class_dist = np.asarray(self.class_dist, dtype=np.float32)
            if self.class_dist.ndim != 2 or self.class_dist.shape[0] != n:
                raise ValueError("class_dist shape does not match boxes")

    def __len__(self) -> int:
        return self.xyxy.shape[0]

    def areas(self) -> np.ndarray:
        return (self.xyxy[:, 2] - self.xyxy[:, 0]) * (
            self.xyxy[:, 3] - self.xyxy[:, 1]
        )

    def select(self, index) -> "BoxSet":
        """Subset by a boolean mask or integer index array."""
        idx = np.asarray(index)
        return BoxSet(
            xyxy=self.xyxy[idx],
            class_ids=None if self.class_ids is None else self.class_ids[idx],
            class_dist=None if self.class_dist is None else self.class_dist[idx],
            scores=None if self.scores is None else self.scores[idx],
            frame=self.frame,
        )

    @staticmethod
    def empty(num_classes: int | None = None, frame: Frame | None = None) -> "BoxSet":
        dist = None
        if num_classes is not None:
            dist = np.zeros((0, num_classes + 1), dtype=np.float32)
        return BoxSet(
            xyxy=np.zeros((0, 4), dtype=np.float32),
            class_ids=np.zeros((0,), dtype=np.int64),
            class_dist=dist,
            scores=np.zeros((0,), dtype=np.float32),
            frame=frame,
        )


@dataclass
class ProposalSet:
    """Candidate regions with objectness scores, tagged with their frame."""

    xyxy: np.ndarray
    objectness: np.ndarray
    frame: Frame

    def __post_init__(self) -> None:
        self.xyxy = np.asarray(self.xyxy, dtype=np.float32).reshape(-1, 4)
        self.objectness = np.asarray(self.objectness, dtype=np.float32).reshape(-1)
        if self.objectness.shape[0] != self.xyxy.shape[0]:
            raise ValueError("objectness length does not match boxes")

    def __len__(self) -> int:
        return self.xyxy.shape[0]


@dataclass
class DetectionSet:
    """Per-proposal detector outputs as torch tensors (gradients preserved).

    xyxy: (N, 4). class_dist: (N, K+1) softmax rows, background last.
    Row order matches the proposal set that produced them.
    """

    xyxy: torch.Tensor
    class_dist: torch.Tensor
    frame: Frame

    def __len__(self) -> int:
        return int(self.xyxy.shape[0])

    def foreground_scores(self) -> torch.Tensor:
        """Max probability over real classes (background column excluded)."""
        return self.class_dist[:, :-1].max(dim=1).values

    def to_boxset(self) -> BoxSet:
        dist = self.class_dist.detach().cpu().numpy().astype(np.float32)
        fg = dist[:, :-1]
        scores = fg.max(axis=1) if dist.shape[0] else np.zeros((0,), np.float32)
        ids = fg.argmax(axis=1) if dist.shape[0] else np.zeros((0,), np.int64)
        return BoxSet(
            xyxy=self.xyxy.detach().cpu().numpy().astype(np.float32),
            class_ids=ids.astype(np.int64),
            class_dist=dist,
            scores=scores.astype(np.float32),
            frame=self.frame,
        )


@dataclass
class LabeledImage:
    """An image with ground-truth boxes (class_ids required on the BoxSet)."""

    image: ImageTensor
    boxes: BoxSet
    image_id: str

    def __post_init__(self) -> None:
        if self.boxes.class_ids is None:
            raise ValueError(f"labeled image {self.image_id} has no class ids")

    @property
    def classes(self) -> np.ndarray:
        return self.boxes.class_ids


@dataclass
class UnlabeledImage:
    """An image without annotations (the target-domain case)."""

    image: ImageTensor
    image_id: str
