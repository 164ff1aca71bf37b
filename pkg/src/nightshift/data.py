"""Dataset ingestion and the procedural day/night scene generator.

Annotations use the common detection interchange JSON layout: top-level
"images", "annotations" (bbox as [x, y, width, height]), and "categories".
A file WITHOUT an "annotations" key is an unlabeled (target-domain) split;
a file with the key but no records for some image yields a LabeledImage
with an empty BoxSet.

The synthetic generator renders simple geometric traffic scenes: four
classes (car, truck, pedestrian, sign) on a bright sky-to-ground gradient.
Night scenes reuse the exact day geometry and re-light it: a gamma curve,
multiplicative darkening, additive glare spots, and sensor noise. Glare
spots are bright round blobs of roughly sign size on purpose - a teacher
that has only seen daylight will happily call them signs, which is the
failure mode the training method exists to suppress.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError, DataError
from .nightaug import GlareSpec
from .structures import BoxSet, Frame, ImageTensor, LabeledImage, UnlabeledImage

CLASS_NAMES = ("car", "truck", "pedestrian", "sign")

# base RGB palette; per-object jitter is applied on top
_PALETTE = {
    "car": (0.22, 0.30, 0.62),
    "truck": (0.22, 0.55, 0.28),
    "pedestrian": (0.68, 0.22, 0.26),
    "sign": (0.88, 0.78, 0.20),
}


@dataclass
class SceneRecipe:
    """Parameters of the procedural scene distribution.

    Geometry fields (object counts, palette) are shared between domains;
    the day_* fields light the base render and the night_* fields re-light
    it. Darkening < 1 together with gamma >= 1 keeps the night mean
    strictly below the day mean in expectation.
    """

    image_size: tuple[int, int] = (128, 128)  # (height, width)
    object_count: tuple[int, int] = (2, 6)
    classes: tuple[str, ...] = CLASS_NAMES
    day_bg_brightness: tuple[float, float] = (0.55, 0.75)
    day_gradient: tuple[float, float] = (0.05, 0.15)
    day_texture_sigma: float = 0.01
    night_gamma: tuple[float, float] = (1.2, 1.8)
    night_darken: tuple[float, float] = (0.18, 0.38)
    night_glare_count: tuple[int, int] = (1, 3)
    night_glare_radius: tuple[float, float] = (4.0, 16.0)
    night_glare_peak: tuple[float, float] = (0.4, 0.9)
    night_noise_sigma: tuple[float, float] = (0.015, 0.04)
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ConfigError(f"recipe image_size must be >= 32, got {self.image_size}")
        if not self.classes or any(c not in _PALETTE for c in self.classes):
            raise ConfigError(f"unknown class in recipe: {self.classes}")
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ConfigError(f"empty object_count range {self.object_count}")
        for name in (
            "day_bg_brightness",
            "day_gradient",
            "night_gamma",
            "night_darken",
            "night_glare_radius",
            "night_glare_peak",
            "night_noise_sigma",
        ):
            a, b = getattr(self, name)
            if b < a:
                raise ConfigError(f"empty recipe range {name}={getattr(self, name)}")
        if self.night_darken[1] >= 1.0 or self.night_darken[0] <= 0.0:
            raise ConfigError(
                "night_darken must lie inside (0, 1) so night stays darker than day"
            )
        if self.night_gamma[0] < 1.0:
            raise ConfigError("night_gamma must be >= 1 (gamma brightening is not night)")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self).items()}

    @staticmethod
    def from_dict(d: dict) -> "SceneRecipe":
        kwargs = {}
        for f in SceneRecipe.__dataclass_fields__:
            if f in d:
                v = d[f]
                kwargs[f] = tuple(v) if isinstance(v, list) else v
        unknown = set(d) - set(SceneRecipe.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown recipe fields: {sorted(unknown)}")
        recipe = SceneRecipe(**kwargs)
        recipe.validate()
        return recipe


def _paint_rect(canvas, cx, cy, w, h, color) -> tuple[int, int, int, int]:
    img_h, img_w = canvas.shape[:2]
    x1 = max(int(round(cx - w / 2)), 0)
    x2 = min(int(round(cx + w / 2)), img_w)
    y1 = max(int(round(cy - h / 2)), 0)
    y2 = min(int(round(cy + h / 2)), img_h)
    canvas[y1:y2, x1:x2] = color
    return x1, y1, x2, y2


def _paint_disk(canvas, cx, cy, r, color) -> tuple[int, int, int, int]:
    img_h, img_w = canvas.shape[:2]
    x1 = max(int(np.floor(cx - r)), 0)
    x2 = min(int(np.ceil(cx + r)) + 1, img_w)
    y1 = max(int(np.floor(cy - r)), 0)
    y2 = min(int(np.ceil(cy + r)) + 1, img_h)
    yy, xx = np.mgrid[y1:y2, x1:x2]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    canvas[y1:y2, x1:x2][mask] = color
    cols = np.flatnonzero(mask.any(axis=0))
    rows = np.flatnonzero(mask.any(axis=1))
    return x1 + cols[0], y1 + rows[0], x1 + cols[-1] + 1, y1 + rows[-1] + 1


def _jittered_color(base, rng) -> np.ndarray:
    c = np.asarray(base, np.float32) + rng.uniform(-0.06, 0.06, size=3).astype(np.float32)
    return np.clip(c, 0.02, 0.98)


def _boxes_overlap(box, others, limit=0.25) -> bool:
    from .boxes import iou_matrix

    if not others:
        return False
    ious = iou_matrix(np.asarray(box, np.float32)[None, :], np.asarray(others, np.float32))
    return bool((ious > limit).any())


def _render_day(recipe: SceneRecipe, rng) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Base daylight render. Returns (pixels, boxes xyxy, class indices)."""
    h, w = recipe.image_size
    base = rng.uniform(*recipe.day_bg_brightness)
    grad = rng.uniform(*recipe.day_gradient)
    tint = rng.uniform(-0.04, 0.04, size=3)
    yy = np.linspace(0.5, -0.5, h, dtype=np.float32)[:, None, None]
    canvas = np.clip(
        base + grad * yy + tint.astype(np.float32)[None, None, :], 0.0, 1.0
    ) * np.ones((h, w, 3), np.float32)

    count = int(rng.integers(recipe.object_count[0], recipe.object_count[1] + 1))
    class_seq = rng.integers(0, len(recipe.classes), size=count)
    boxes, class_ids = [], []
    for k in range(count):
        name = recipe.classes[int(class_seq[k])]
        color = _jittered_color(_PALETTE[name], rng)
        if name == "car":
            bw = rng.uniform(14, 26)
            bh = bw * rng.uniform(0.45, 0.60)
        elif name == "truck":
            bw = rng.uniform(20, 34)
            bh = bw * rng.uniform(0.50, 0.70)
        elif name == "pedestrian":
            bw = rng.uniform(4, 8)
            bh = rng.uniform(13, 26)
        else:  # sign
            bw = bh = rng.uniform(4.0, 8.0)

        placed = None
        for _ in range(12):
            cx = rng.uniform(bw / 2 + 1, w - bw / 2 - 1)
            cy = rng.uniform(bh / 2 + 1, h - bh / 2 - 1)
            cand = (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2)
            placed = (cx, cy)
            if not _boxes_overlap(cand, boxes):
                break
        cx, cy = placed

        if name == "sign":
            ext = _paint_disk(canvas, cx, cy, bw / 2, color)
        else:
            ext = _paint_rect(canvas, cx, cy, bw, bh, color)
            if name in ("car", "truck"):
                # darker cabin band along the top third for a bit of texture
                band_h = max((ext[3] - ext[1]) // 3, 1)
                canvas[ext[1] : ext[1] + band_h, ext[0] : ext[2]] = color * 0.55
        if ext[2] - ext[0] < 2 or ext[3] - ext[1] < 2:
            continue  # clipped to a sliver; drop the object, keep rng alignment
        boxes.append(ext)
        class_ids.append(CLASS_NAMES.index(name))

    if recipe.day_texture_sigma > 0:
        canvas = canvas + rng.normal(0, recipe.day_texture_sigma, (h, w, 1)).astype(
            np.float32
        )
    canvas = np.clip(canvas, 0.0, 1.0)
    return (
        canvas,
        np.asarray(boxes, np.float32).reshape(-1, 4),
        np.asarray(class_ids, np.int64),
    )


def _apply_night(pixels: np.ndarray, recipe: SceneRecipe, rng) -> np.ndarray:
    """Re-light a day render: gamma, darken, glare spots, sensor noise."""
    h, w = pixels.shape[:2]
    gamma = rng.uniform(*recipe.night_gamma)
    darken = rng.uniform(*recipe.night_darken)
    out = np.power(pixels, np.float32(gamma)) * np.float32(darken)
    count = int(
        rng.integers(recipe.night_glare_count[0], recipe.night_glare_count[1] + 1)
    )
    for _ in range(count):
        cx = float(rng.uniform(0, w))
        cy = float(rng.uniform(0, h))
        radius = float(rng.uniform(*recipe.night_glare_radius))
        peak = float(rng.uniform(*recipe.night_glare_peak))
        out = out + GlareSpec((cx, cy), radius, peak).render(h, w)[:, :, None]
    sigma = rng.uniform(*recipe.night_noise_sigma)
    out = out + rng.normal(0, sigma, (h, w, 3)).astype(np.float32)
    return np.clip(out, 0.0, 1.0)


def generate_scene(
    recipe: SceneRecipe,
    domain: str,
    rng: np.random.Generator,
    image_id: str = "scene",
) -> LabeledImage:
    """Render one scene. Day and night runs of the same rng share geometry.

    All geometry draws happen before any lighting draw, so generating the
    day and night variants from generators seeded identically yields
    identical box lists.
    """
    if domain not in ("day", "night"):
        raise ConfigError(f"domain must be 'day' or 'night', got {domain!r}")
    pixels, boxes, class_ids = _render_day(recipe, rng)
    if domain == "night":
        pixels = _apply_night(pixels, recipe, rng)
    frame = Frame(image_id, 1.0)
    return LabeledImage(
        image=ImageTensor(pixels, frame),
        boxes=BoxSet(xyxy=boxes, class_ids=class_ids, frame=frame),
        image_id=image_id,
    )


def generate_pair(
    recipe: SceneRecipe,
    rng: np.random.Generator,
    day_id: str = "day",
    night_id: str = "night",
) -> tuple[LabeledImage, LabeledImage]:
    """One geometry, two lightings (single render, shared boxes)."""
    pixels, boxes, class_ids = _render_day(recipe, rng)
    night_pixels = _apply_night(pixels, recipe, rng)
    day = LabeledImage(
        image=ImageTensor(pixels, Frame(day_id, 1.0)),
        boxes=BoxSet(xyxy=boxes.copy(), class_ids=class_ids.copy(), frame=Frame(day_id, 1.0)),
        image_id=day_id,
    )
    night = LabeledImage(
        image=ImageTensor(night_pixels, Frame(night_id, 1.0)),
        boxes=BoxSet(
            xyxy=boxes.copy(), class_ids=class_ids.copy(), frame=Frame(night_id, 1.0)
        ),
        image_id=night_id,
    )
    return day, night


def scene_rng(recipe_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Deterministic per-scene generator: (recipe seed, stream, index)."""
    return np.random.default_rng(np.random.SeedSequence([recipe_seed, stream, index]))


class SyntheticDataset:
    """Procedural dataset generated on access (optionally cached as uint8).

    Two datasets with the same recipe seed and stream yield paired scenes
    index by index; use different streams for disjoint source/target/val
    splits.
    """

    def __init__(
        self,
        recipe: SceneRecipe,
        count: int,
        domain: str,
        stream: int = 0,
        labeled: bool = True,
        id_prefix: str | None = None,
        cache: bool = False,
    ):
        recipe.validate()
        if domain not in ("day", "night"):
            raise ConfigError(f"domain must be 'day' or 'night', got {domain!r}")
        self.recipe = recipe
        self.count = int(count)
        self.domain = domain
        self.stream = stream
        self.labeled = labeled
        self.id_prefix = id_prefix or domain
        self.categories = {i: n for i, n in enumerate(CLASS_NAMES)}
        self._cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._use_cache = cache

    def __len__(self) -> int:
        return self.count

    def image_id(self, index: int) -> str:
        return f"{self.id_prefix}_{index:06d}"

    def _generate(self, index: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if self._use_cache and index in self._cache:
            q, boxes, cls = self._cache[index]
            return q.astype(np.float32) / 255.0, boxes, cls
        rng = scene_rng(self.recipe.seed, index, self.stream)
        scene = generate_scene(self.recipe, self.domain, rng, self.image_id(index))
        pixels = scene.image.pixels
        boxes = scene.boxes.xyxy
        cls = scene.boxes.class_ids
        if self._use_cache:
            q = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
            self._cache[index] = (q, boxes, cls)
            return q.astype(np.float32) / 255.0, boxes, cls
        return pixels, boxes, cls

    def __getitem__(self, index: int):
        if not 0 <= index < self.count:
            raise IndexError(index)
        pixels, boxes, cls = self._generate(index)
        image_id = self.image_id(index)
        frame = Frame(image_id, 1.0)
        image = ImageTensor(pixels, frame)
        if not self.labeled:
            return UnlabeledImage(image=image, image_id=image_id)
        return LabeledImage(
            image=image,
            boxes=BoxSet(xyxy=boxes, class_ids=cls, frame=frame),
            image_id=image_id,
        )


def save_image(path: str, pixels: np.ndarray) -> None:
    bgr = cv2.cvtColor(
        np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8), cv2.COLOR_RGB2BGR
    )
    if not cv2.imwrite(path, bgr):
        raise DataError(f"could not write image file {path}")


def load_image(path: str) -> np.ndarray:
    bgr = cv2.imread(path, cv2.IMREAD_COLOR)
    if bgr is None:
        raise DataError(f"could not read image file {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_dataset(
    out_dir: str,
    dataset,
    annotation_name: str = "annotations.json",
    unlabeled: bool = False,
) -> str:
    """Write images + annotation JSON for any indexable LabeledImage source."""
    os.makedirs(out_dir, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    categories = getattr(dataset, "categories", {i: n for i, n in enumerate(CLASS_NAMES)})
    for i in range(len(dataset)):
        sample = dataset[i]
        image_id = sample.image_id
        file_name = f"{image_id}.png"
        save_image(os.path.join(out_dir, file_name), sample.image.pixels)
        images.append(
            {
                "id": image_id,
                "file_name": file_name,
                "width": sample.image.width,
                "height": sample.image.height,
            }
        )
        if unlabeled or not isinstance(sample, LabeledImage):
            continue
        for box, cls in zip(sample.boxes.xyxy, sample.boxes.class_ids):
            x1, y1, x2, y2 = (float(v) for v in box)
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": int(cls),
                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                    "area": (x2 - x1) * (y2 - y1),
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "categories": [{"id": i, "name": n} for i, n in sorted(categories.items())],
    }
    if not unlabeled:
        doc["annotations"] = annotations
    path = os.path.join(out_dir, annotation_name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return path


class FileDataset:
    """Dataset backed by an annotation JSON plus image files on disk."""

    def __init__(self, annotation_path: str, image_root: str | None = None, cache: bool = False):
        self.annotation_path = annotation_path
        self.image_root = image_root or os.path.dirname(os.path.abspath(annotation_path))
        try:
            with open(annotation_path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"annotation file not found: {annotation_path}") from None
        except json.JSONDecodeError as e:
            raise DataError(f"annotation file {annotation_path} is not valid JSON: {e}") from None

        if "images" not in doc or "categories" not in doc:
            raise DataError(
                f"annotation file {annotation_path} needs 'images' and 'categories'"
            )
        self.labeled = "annotations" in doc
        self.categories: dict[int, str] = {}
        for rec in doc["categories"]:
            try:
                self.categories[int(rec["id"])] = str(rec["name"])
            except (KeyError, TypeError, ValueError):
                raise DataError(f"malformed category record: {rec!r}") from None

        self._images = []
        self._by_id: dict[str, int] = {}
        for rec in doc["images"]:
            for key in ("id", "file_name"):
                if key not in rec:
                    raise DataError(f"image record missing {key!r}: {rec!r}")
            image_id = str(rec["id"])
            path = os.path.join(self.image_root, rec["file_name"])
            if not os.path.isfile(path):
                raise DataError(f"image file not found: {path}")
            self._by_id[image_id] = len(self._images)
            self._images.append((image_id, path))

        self._boxes: dict[str, list] = {img_id: [] for img_id, _ in self._images}
        if self.labeled:
            for rec in doc["annotations"]:
                rid = rec.get("id", "<missing id>")
                try:
                    image_id = str(rec["image_id"])
                    cat = int(rec["category_id"])
                    x, y, w, h = (float(v) for v in rec["bbox"])
                except (KeyError, TypeError, ValueError):
                    raise DataError(f"malformed annotation record id={rid!r}") from None
                if image_id not in self._boxes:
                    raise DataError(
                        f"annotation record id={rid!r} references unknown image {image_id!r}"
                    )
                if cat not in self.categories:
                    raise DataError(
                        f"annotation record id={rid!r} has unknown category {cat}"
                    )
                if w <= 0 or h <= 0:
                    raise DataError(f"annotation record id={rid!r} has degenerate bbox")
                self._boxes[image_id].append((x, y, x + w, y + h, cat))

        self._cache: dict[int, np.ndarray] = {}
        self._use_cache = cache

    def __len__(self) -> int:
        return len(self._images)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def __getitem__(self, index: int):
        image_id, path = self._images[index]
        if self._use_cache and index in self._cache:
            pixels = self._cache[index].astype(np.float32) / 255.0
        else:
            pixels = load_image(path)
            if self._use_cache:
                self._cache[index] = np.clip(
                    np.round(pixels * 255.0), 0, 255
                ).astype(np.uint8)
        frame = Frame(image_id, 1.0)
        image = ImageTensor(pixels, frame)
        if not self.labeled:
            return UnlabeledImage(image=image, image_id=image_id)
        rows = self._boxes[image_id]
        if rows:
            arr = np.asarray([r[:4] for r in rows], np.float32)
            cls = np.asarray([r[4] for r in rows], np.int64)
        else:
            arr = np.zeros((0, 4), np.float32)
            cls = np.zeros((0,), np.int64)
        return LabeledImage(
            image=image,
            boxes=BoxSet(xyxy=arr, class_ids=cls, frame=frame),
            image_id=image_id,
        )


def load_dataset(annotation_path: str, image_root: str | None = None, cache: bool = False) -> FileDataset:
    return FileDataset(annotation_path, image_root, cache=cache)


def resize_shorter_side(
    img: ImageTensor, boxes: BoxSet | None, target: int
) -> tuple[ImageTensor, BoxSet | None]:
    """Aspect-preserving resize so the shorter side equals `target`.

    Box coordinates scale per axis. The result keeps the image id with
    scale tag 1.0: the resized image becomes the canonical full-resolution
    frame everything downstream refers to.
    """
    if target < 32:
        raise ValueError(f"target must be >= 32, got {target}")
    h, w = img.height, img.width
    if min(h, w) == target:
        return img, boxes
    if h <= w:
        new_h = target
        new_w = int(np.floor(w * target / h + 0.5))
    else:
        new_w = target
        new_h = int(np.floor(h * target / w + 0.5))
    pixels = cv2.resize(img.pixels, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    frame = Frame(img.frame.image_id, 1.0)
    out_img = ImageTensor(np.clip(pixels, 0.0, 1.0), frame)
    if boxes is None:
        return out_img, None
    sx = new_w / w
    sy = new_h / h
    xyxy = boxes.xyxy * np.asarray([sx, sy, sx, sy], np.float32)
    out_boxes = BoxSet(
        xyxy=xyxy,
        class_ids=boxes.class_ids,
        class_dist=boxes.class_dist,
        scores=boxes.scores,
        frame=frame,
    )
    return out_img, out_boxes


class EpochSampler:
    """Shuffled index stream that reshuffles each time it exhausts."""

    def __init__(self, size: int, rng: np.random.Generator):
        if size < 1:
            raise DataError("cannot sample from an empty dataset")
        self.size = size
        self.rng = rng
        self._order: list[int] = []

    def next(self, k: int) -> list[int]:
        out = []
        while len(out) < k:
            if not self._order:
                self._order = list(self.rng.permutation(self.size))
            out.append(int(self._order.pop()))
        return out
