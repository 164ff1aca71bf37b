import json

import numpy as np
import pytest

from nightshift.data import (
    CLASS_NAMES,
    EpochSampler,
    FileDataset,
    SyntheticDataset,
    generate_pair,
    generate_scene,
    load_image,
    resize_shorter_side,
    save_image,
    scene_rng,
    write_dataset,
)
from nightshift.errors import ConfigError, DataError
from nightshift.structures import Frame, ImageTensor, LabeledImage, UnlabeledImage

from conftest import make_boxes


def test_pair_shares_geometry(scene_pair):
    day, night = scene_pair
    assert np.array_equal(day.boxes.xyxy, night.boxes.xyxy)
    assert np.array_equal(day.boxes.class_ids, night.boxes.class_ids)
    assert not np.array_equal(day.image.pixels, night.image.pixels)


def test_night_is_darker_in_aggregate(recipe):
    day_means, night_means = [], []
    for i in range(40):
        day, night = generate_pair(recipe, scene_rng(recipe.seed, i, 0), "d", "n")
        day_means.append(float(day.image.pixels.mean()))
        night_means.append(float(night.image.pixels.mean()))
    assert np.mean(night_means) < np.mean(day_means) - 0.2


def test_scene_objects_within_bounds(recipe):
    for i in range(10):
        scene = generate_scene(recipe, "day", scene_rng(recipe.seed, i, 0), f"s{i}")
        n = len(scene.boxes)
        assert recipe.object_count[0] <= n <= recipe.object_count[1]
        assert (scene.boxes.class_ids >= 0).all()
        assert (scene.boxes.class_ids < len(CLASS_NAMES)).all()
        h, w = scene.image.pixels.shape[:2]
        assert (scene.boxes.xyxy[:, 0] >= 0).all() and (scene.boxes.xyxy[:, 1] >= 0).all()
        assert (scene.boxes.xyxy[:, 2] <= w).all() and (scene.boxes.xyxy[:, 3] <= h).all()
        assert (scene.boxes.areas() >= 4.0).all()


def test_generate_scene_rejects_bad_domain(recipe):
    with pytest.raises(ConfigError):
        generate_scene(recipe, "dusk", scene_rng(recipe.seed, 0, 0), "x")


def test_synthetic_dataset_deterministic(recipe):
    a = SyntheticDataset(recipe, 6, "night", stream=1, labeled=True, id_prefix="n")
    b = SyntheticDataset(recipe, 6, "night", stream=1, labeled=True, id_prefix="n")
    sa, sb = a[3], b[3]
    assert sa.image_id == sb.image_id == "n_000003"
    assert np.array_equal(sa.image.pixels, sb.image.pixels)
    assert np.array_equal(sa.boxes.xyxy, sb.boxes.xyxy)


def test_synthetic_streams_are_independent(recipe):
    a = SyntheticDataset(recipe, 3, "day", stream=0, labeled=True)
    b = SyntheticDataset(recipe, 3, "day", stream=1, labeled=True)
    assert not np.array_equal(a[0].image.pixels, b[0].image.pixels)


def test_synthetic_unlabeled_yields_unlabeled_images(recipe):
    ds = SyntheticDataset(recipe, 2, "night", stream=1, labeled=False)
    sample = ds[0]
    assert isinstance(sample, UnlabeledImage)


def test_synthetic_cache_quantizes_to_8bit(recipe):
    plain = SyntheticDataset(recipe, 2, "day", stream=0, labeled=True)
    cached = SyntheticDataset(recipe, 2, "day", stream=0, labeled=True, cache=True)
    first = cached[1].image.pixels
    again = cached[1].image.pixels
    assert np.array_equal(first, again)
    assert np.allclose(first, plain[1].image.pixels, atol=1.0 / 255.0)


def test_write_and_reload_round_trip(tmp_path, recipe):
    ds = SyntheticDataset(recipe, 4, "day", stream=0, labeled=True, id_prefix="rt")
    ann = write_dataset(str(tmp_path), ds)
    loaded = FileDataset(ann)
    assert len(loaded) == 4
    assert loaded.categories == {i: n for i, n in enumerate(CLASS_NAMES)}
    for i in range(4):
        orig, back = ds[i], loaded[i]
        assert isinstance(back, LabeledImage)
        assert back.image_id == orig.image_id
        assert np.allclose(back.image.pixels, orig.image.pixels, atol=0.51 / 255.0)
        assert np.allclose(back.boxes.xyxy, orig.boxes.xyxy, atol=1e-4)
        assert np.array_equal(back.boxes.class_ids, orig.boxes.class_ids)


def test_unlabeled_round_trip(tmp_path, recipe):
    ds = SyntheticDataset(recipe, 2, "night", stream=1, labeled=True, id_prefix="u")
    ann = write_dataset(str(tmp_path), ds, unlabeled=True)
    doc = json.loads(open(ann).read())
    assert "annotations" not in doc
    loaded = FileDataset(ann)
    assert not loaded.labeled
    assert isinstance(loaded[0], UnlabeledImage)


def test_file_dataset_missing_annotation_file(tmp_path):
    missing = tmp_path / "nope.json"
    with pytest.raises(DataError, match="nope.json"):
        FileDataset(str(missing))


def test_file_dataset_missing_image_file(tmp_path):
    doc = {
        "images": [{"id": "ghost", "file_name": "ghost.png", "width": 64, "height": 64}],
        "annotations": [],
        "categories": [{"id": 0, "name": "car"}],
    }
    path = tmp_path / "ann.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(DataError, match="ghost"):
        FileDataset(str(path))


def test_file_dataset_malformed_records(tmp_path):
    img = np.full((64, 64, 3), 0.5, np.float32)
    save_image(str(tmp_path / "a.png"), img)
    base = {
        "images": [{"id": "a", "file_name": "a.png", "width": 64, "height": 64}],
        "categories": [{"id": 0, "name": "car"}],
    }
    bad_bbox = dict(base, annotations=[
        {"id": 1, "image_id": "a", "category_id": 0, "bbox": [1, 2, 3]},
    ])
    path = tmp_path / "bad1.json"
    path.write_text(json.dumps(bad_bbox))
    with pytest.raises(DataError):
        FileDataset(str(path))

    unknown_image = dict(base, annotations=[
        {"id": 1, "image_id": "zzz", "category_id": 0, "bbox": [1, 2, 3, 4]},
    ])
    path2 = tmp_path / "bad2.json"
    path2.write_text(json.dumps(unknown_image))
    with pytest.raises(DataError, match="zzz"):
        FileDataset(str(path2))

    unknown_category = dict(base, annotations=[
        {"id": 1, "image_id": "a", "category_id": 9, "bbox": [1, 2, 3, 4]},
    ])
    path3 = tmp_path / "bad3.json"
    path3.write_text(json.dumps(unknown_category))
    with pytest.raises(DataError):
        FileDataset(str(path3))

    degenerate = dict(base, annotations=[
        {"id": 1, "image_id": "a", "category_id": 0, "bbox": [1, 2, 0, 4]},
    ])
    path4 = tmp_path / "bad4.json"
    path4.write_text(json.dumps(degenerate))
    with pytest.raises(DataError):
        FileDataset(str(path4))


def test_save_load_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((40, 56, 3)).astype(np.float32)
    path = str(tmp_path / "x.png")
    save_image(path, img)
    back = load_image(path)
    assert back.shape == (40, 56, 3)
    assert back.dtype == np.float32
    assert np.allclose(back, img, atol=0.51 / 255.0)


def test_resize_shorter_side_exact_dimensions():
    img = ImageTensor(np.zeros((720, 1280, 3), np.float32), Frame("wide"))
    boxes = make_boxes([[128, 72, 640, 360]], frame=img.frame)
    out, mapped = resize_shorter_side(img, boxes, 600)
    # 720 -> 600, 1280 -> floor(1280 * 600/720 + 0.5) = 1067
    assert out.pixels.shape == (600, 1067, 3)
    sx, sy = 1067 / 1280, 600 / 720
    assert np.allclose(
        mapped.xyxy, [[128 * sx, 72 * sy, 640 * sx, 360 * sy]], rtol=1e-5
    )
    assert out.frame.scale == pytest.approx(1.0)


def test_resize_shorter_side_image_only():
    img = ImageTensor(np.zeros((256, 128, 3), np.float32), Frame("tall"))
    out, mapped = resize_shorter_side(img, None, 64)
    assert out.pixels.shape == (128, 64, 3)
    assert mapped is None


def test_epoch_sampler_covers_everything_twice():
    sampler = EpochSampler(10, np.random.default_rng(5))
    drawn = []
    for _ in range(5):
        batch = sampler.next(4)
        assert len(batch) == 4
        drawn.extend(batch)
    counts = np.bincount(np.array(drawn), minlength=10)
    assert (counts == 2).all()


def test_scene_rng_streams_differ():
    a = scene_rng(1, 0, 0).random(4)
    b = scene_rng(1, 0, 1).random(4)
    c = scene_rng(1, 1, 0).random(4)
    assert not np.allclose(a, b)
    assert not np.allclose(a, c)
