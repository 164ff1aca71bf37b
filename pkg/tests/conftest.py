import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from nightshift.data import SceneRecipe, generate_pair, scene_rng
from nightshift.detector import DetectorConfig, build_detector
from nightshift.structures import BoxSet, Frame, ImageTensor


@pytest.fixture(scope="session")
def recipe():
    return SceneRecipe(seed=11)


@pytest.fixture(scope="session")
def scene_pair(recipe):
    rng = scene_rng(recipe.seed, 0, 0)
    return generate_pair(recipe, rng, "day_000000", "night_000000")


@pytest.fixture(scope="session")
def frozen_detector():
    """Shared model for read-only forward passes. Never train this one."""
    return build_detector(DetectorConfig(), seed=0)


@pytest.fixture()
def fresh_detector():
    return build_detector(DetectorConfig(), seed=0)


def make_image(h=64, w=64, value=0.5, image_id="img", scale=1.0):
    pixels = np.full((h, w, 3), value, dtype=np.float32)
    return ImageTensor(pixels, Frame(image_id, scale))


def make_boxes(xyxy, class_ids=None, scores=None, frame=None, num_classes=4):
    xyxy = np.asarray(xyxy, dtype=np.float32).reshape(-1, 4)
    if class_ids is None:
        class_ids = np.zeros((len(xyxy),), dtype=np.int64)
    else:
        class_ids = np.asarray(class_ids, dtype=np.int64)
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float32)
    return BoxSet(xyxy=xyxy, class_ids=class_ids, scores=scores, frame=frame)


class StubRng:
    """Scripted generator for draw-order tests.

    random() pops from `uniforms`; integers(lo, hi, size=2) pops a pair from
    `int_pairs`. Exhaustion raises, so a test also pins how many draws the
    code under test consumes.
    """

    def __init__(self, uniforms, int_pairs=()):
        self.uniforms = list(uniforms)
        self.int_pairs = [np.asarray(p, dtype=np.int64) for p in int_pairs]

    def random(self):
        if not self.uniforms:
            raise AssertionError("unexpected extra rng.random() draw")
        return self.uniforms.pop(0)

    def integers(self, low, high, size=None):
        if not self.int_pairs:
            raise AssertionError("unexpected extra rng.integers() draw")
        pair = self.int_pairs.pop(0)
        assert size == 2
        if not ((pair >= low).all() and (pair < high).all()):
            raise AssertionError("scripted integers outside [low, high)")
        return pair
