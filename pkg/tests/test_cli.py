import json
import pathlib

import numpy as np
import pytest

from nightshift.cli import build_parser, dispatch
from nightshift.config import config_from_dict
from nightshift.data import SceneRecipe, load_image
from nightshift.trainer import train


@pytest.fixture(scope="module")
def micro_artifacts(tmp_path_factory):
    """One tiny trained checkpoint plus an on-disk labeled night set."""
    root = tmp_path_factory.mktemp("cli")
    cfg = config_from_dict(
        {
            "pretrain_iters": 1,
            "total_iters": 2,
            "batch_source": 2,
            "batch_target": 2,
            "eval_interval": 50,
            "checkpoint_interval": 50,
            "resize_target": 64,
            "data": {
                "synthetic": {
                    "source_count": 4,
                    "target_count": 4,
                    "val_count": 2,
                    "recipe": {"image_size": [64, 64], "seed": 9},
                }
            },
        }
    )
    result = train(cfg, str(root / "run"))

    recipe = root / "recipe.json"
    recipe.write_text(json.dumps(SceneRecipe(image_size=(64, 64), seed=9).to_dict()))
    data_dir = root / "valset"
    rc = dispatch(
        [
            "gen-synthetic",
            "--out", str(data_dir),
            "--count", "5",
            "--domain", "night",
            "--recipe", str(recipe),
            "--stream", "2",
        ]
    )
    assert rc == 0
    return {
        "ckpt": result.final_checkpoint,
        "metrics": result.metrics_path,
        "annotations": str(data_dir / "annotations.json"),
        "recipe": str(recipe),
        "root": root,
    }


# ----- parser behavior --------------------------------------------------------


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        dispatch(["--help"])
    assert exc.value.code == 0
    assert "gen-synthetic" in capsys.readouterr().out


def test_no_arguments_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        dispatch([])
    assert exc.value.code == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        dispatch(["transmogrify"])
    assert exc.value.code == 2


def test_every_subcommand_is_wired():
    parser = build_parser()
    # probing the registered choices rather than parsing (which would exit)
    sub = next(
        a for a in parser._actions if isinstance(a, type(parser._subparsers._group_actions[0]))
    )
    assert set(sub.choices) == {
        "train", "eval", "gen-synthetic", "nightaug-preview", "pseudo-dump", "plot",
    }


# ----- diagnosed failures return 1 with a message -----------------------------


def test_train_missing_config_reports_error(tmp_path, capsys):
    rc = dispatch(
        ["train", "--config", str(tmp_path / "ghost.json"), "--out", str(tmp_path)]
    )
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error:")
    assert "ghost.json" in err


def test_eval_missing_checkpoint_reports_error(tmp_path, capsys, micro_artifacts):
    rc = dispatch(
        [
            "eval",
            "--ckpt", str(tmp_path / "none.pt"),
            "--data", micro_artifacts["annotations"],
        ]
    )
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_plot_without_eval_records_reports_error(tmp_path, capsys):
    log = tmp_path / "metrics.jsonl"
    log.write_text(json.dumps({"type": "iter", "iteration": 0}) + "\n")
    rc = dispatch(["plot", "--log", str(log), "--out", str(tmp_path / "plots")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


# ----- gen-synthetic -----------------------------------------------------------


def test_gen_synthetic_paired_layout(tmp_path, capsys, micro_artifacts):
    out = tmp_path / "pair"
    rc = dispatch(
        [
            "gen-synthetic",
            "--out", str(out),
            "--count", "3",
            "--domain", "paired",
            "--recipe", micro_artifacts["recipe"],
        ]
    )
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    for domain in ("day", "night"):
        doc = json.loads((out / domain / "annotations.json").read_text())
        assert len(doc["images"]) == 3
        assert doc["annotations"], "paired output should be labeled"
        assert {c["name"] for c in doc["categories"]}
        first = doc["images"][0]
        pixels = load_image(str(out / domain / first["file_name"]))
        assert pixels.shape == (first["height"], first["width"], 3)
    # same geometry, different lighting
    day_doc = json.loads((out / "day" / "annotations.json").read_text())
    night_doc = json.loads((out / "night" / "annotations.json").read_text())
    assert [a["bbox"] for a in day_doc["annotations"]] == [
        a["bbox"] for a in night_doc["annotations"]
    ]


def test_gen_synthetic_unlabeled_omits_annotations(tmp_path, micro_artifacts):
    out = tmp_path / "unlab"
    rc = dispatch(
        [
            "gen-synthetic",
            "--out", str(out),
            "--count", "2",
            "--domain", "night",
            "--recipe", micro_artifacts["recipe"],
            "--unlabeled",
        ]
    )
    assert rc == 0
    doc = json.loads((out / "annotations.json").read_text())
    assert "annotations" not in doc
    assert len(doc["images"]) == 2


# ----- nightaug-preview ---------------------------------------------------------


def test_nightaug_preview_writes_variants_and_trace(tmp_path, capsys):
    from nightshift.data import save_image

    rng = np.random.default_rng(0)
    src = tmp_path / "scene.png"
    save_image(str(src), rng.random((48, 48, 3)).astype(np.float32) * 0.5 + 0.4)

    out = tmp_path / "aug"
    rc = dispatch(
        ["nightaug-preview", "--input", str(src), "--out", str(out), "--count", "3",
         "--seed", "7"]
    )
    assert rc == 0
    pngs = sorted(out.glob("scene_aug*.png"))
    assert [p.name for p in pngs] == ["scene_aug00.png", "scene_aug01.png", "scene_aug02.png"]
    trace = json.loads((out / "scene_trace.json").read_text())
    assert trace["seed"] == 7
    assert len(trace["variants"]) == 3
    for variant in trace["variants"]:
        steps = variant["steps"]
        assert [s["augmentation"] for s in steps] == [
            "brightness", "contrast", "gamma", "noise", "blur", "glare",
        ]
        for s in steps:
            assert ("strength" in s) == s["applied"]


# ----- eval and pseudo-dump against a real checkpoint ---------------------------


def test_eval_checkpoint_outputs_json(capsys, micro_artifacts):
    rc = dispatch(
        [
            "eval",
            "--ckpt", micro_artifacts["ckpt"],
            "--data", micro_artifacts["annotations"],
            "--resize", "64",
        ]
    )
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["iou"] == 0.5
    assert 0.0 <= doc["mean_ap"] <= 1.0
    assert doc["model"] == "teacher"  # auto picks the burned-in teacher
    assert doc["checkpoint"] == micro_artifacts["ckpt"]
    assert set(doc["gt_counts"]) == {"small", "medium", "large", "total"}


def test_eval_coco_mode_and_file_output(tmp_path, capsys, micro_artifacts):
    out = tmp_path / "eval.json"
    rc = dispatch(
        [
            "eval",
            "--ckpt", micro_artifacts["ckpt"],
            "--data", micro_artifacts["annotations"],
            "--resize", "64",
            "--iou", "coco",
            "--model", "student",
            "--out", str(out),
        ]
    )
    assert rc == 0
    printed = json.loads(capsys.readouterr().out)
    written = json.loads(out.read_text())
    assert printed == written
    assert printed["iou"] == "coco"
    assert printed["model"] == "student"


def test_pseudo_dump_schema(tmp_path, capsys, micro_artifacts):
    out = tmp_path / "pseudo.json"
    rc = dispatch(
        [
            "pseudo-dump",
            "--ckpt", micro_artifacts["ckpt"],
            "--data", micro_artifacts["annotations"],
            "--out", str(out),
            "--tau", "0.05",
            "--resize", "64",
        ]
    )
    assert rc == 0
    assert capsys.readouterr().out.strip() == str(out)
    doc = json.loads(out.read_text())
    assert len(doc["images"]) == 5
    assert doc["params"] == {
        "tau": 0.05,
        "nms_iou": 0.5,
        "model": "teacher",
        "checkpoint": micro_artifacts["ckpt"],
        "resize": 64,
    }
    assert doc["annotations"], "tau=0.05 should let some boxes through"
    for ann in doc["annotations"]:
        assert len(ann["bbox"]) == 4
        assert ann["bbox"][2] > 0 and ann["bbox"][3] > 0
        assert 0.05 <= ann["score"] <= 1.0
        assert ann["image_id"] in {im["id"] for im in doc["images"]}


# ----- plot ---------------------------------------------------------------------


def test_plot_renders_curves(tmp_path, capsys):
    log = tmp_path / "metrics.jsonl"
    records = []
    for i, ap in enumerate([0.1, 0.3, 0.5]):
        records.append(
            {
                "type": "eval",
                "iteration": (i + 1) * 100,
                "model": "teacher",
                "mean_ap": ap,
                "ap_small": None,  # all-None series must be skipped, not plotted
                "ap_medium": ap / 2,
                "ap_large": ap / 3,
            }
        )
    log.write_text("".join(json.dumps(r) + "\n" for r in records))
    out = tmp_path / "plots"
    rc = dispatch(["plot", "--log", str(log), "--out", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out.strip().splitlines()
    written = sorted(p.name for p in out.glob("*.png"))
    assert sorted(pathlib.Path(p).name for p in printed) == written
    assert "ap50.png" in written
    assert "ap_small.png" not in written
    assert "ap_medium.png" in written
