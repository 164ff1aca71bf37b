import json
import pathlib

import pytest
import torch

from nightshift.config import config_from_dict
from nightshift.errors import TrainingDiverged
from nightshift.meanteacher import parameter_checksum
from nightshift.trainer import ITER_METRIC_KEYS, Trainer, total_loss, train


def _tiny_doc(**overrides):
    doc = {
        "seed": 0,
        "pretrain_iters": 3,
        "total_iters": 7,
        "batch_source": 2,
        "batch_target": 2,
        "eval_interval": 3,
        "checkpoint_interval": 6,
        "resize_target": 64,
        "learning_rate": 0.01,
        "ema_coeff": 0.99,
        "conf_thresh": 0.25,  # untrained teachers clear this, so the
        "scale_schedule": {"min_box_area": 12.0},  # target branch really runs
        "data": {
            "synthetic": {
                "source_count": 10,
                "target_count": 10,
                "val_count": 3,
                "recipe": {"image_size": [64, 64], "seed": 5},
            }
        },
    }
    doc.update(overrides)
    return doc


def _read_records(metrics_path):
    with open(metrics_path) as fh:
        return [json.loads(line) for line in fh]


# ----- loss combination -------------------------------------------------------


def test_total_loss_hand_values():
    assert float(total_loss(torch.tensor(1.0), torch.tensor(0.5), 0.3)) == pytest.approx(
        1.15
    )
    sup = torch.tensor(2.0)
    assert total_loss(sup, None, 0.3) is sup
    assert float(total_loss(torch.tensor(1.0), torch.tensor(9.0), 0.0)) == pytest.approx(
        1.0
    )


# ----- full tiny run: artifacts, schedule, determinism -------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run_a"))
    cfg = config_from_dict(_tiny_doc())
    return cfg, train(cfg, out)


def test_run_writes_manifest_and_checkpoints(tiny_run):
    cfg, result = tiny_run
    out = pathlib.Path(result.out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["config_hash"] == cfg.config_hash()
    assert manifest["artifacts"]["final_checkpoint"] == "checkpoint_final.pt"
    assert manifest["summary"]["final"]["iteration"] == 7
    assert (out / "checkpoint_iter000006.pt").exists()
    assert (out / "checkpoint_final.pt").exists()
    assert (out / "checkpoint_final.pt.json").exists()
    assert result.final_checkpoint == str(out / "checkpoint_final.pt")


def test_iter_records_schema_and_phases(tiny_run):
    _, result = tiny_run
    iters = [r for r in _read_records(result.metrics_path) if r["type"] == "iter"]
    assert len(iters) == 7
    assert [r["phase"] for r in iters] == ["pretrain"] * 3 + ["joint"] * 4
    for r in iters:
        for key in ITER_METRIC_KEYS:
            assert key in r, key
            assert r[key] == r[key]  # never NaN
    # pretrain iterations carry no target-branch signal
    assert all(r["loss_unsup"] == 0.0 for r in iters[:3])


def test_eval_model_switches_at_burn_in(tiny_run):
    _, result = tiny_run
    by_iter = {r["iteration"]: r["model"] for r in result.eval_history}
    # burn-in lands at iteration 3, so the iteration-3 eval still sees the
    # un-copied teacher and reports the student
    assert by_iter == {3: "student", 6: "teacher", 7: "teacher"}


def test_replay_is_deterministic(tiny_run, tmp_path):
    cfg_b = config_from_dict(_tiny_doc())
    result_b = train(cfg_b, str(tmp_path / "run_b"))
    _, result_a = tiny_run
    recs_a = _read_records(result_a.metrics_path)
    recs_b = _read_records(result_b.metrics_path)
    assert recs_a == recs_b
    assert parameter_checksum(result_a.state.student) == parameter_checksum(
        result_b.state.student
    )
    assert parameter_checksum(result_a.state.teacher) == parameter_checksum(
        result_b.state.teacher
    )


def test_class_count_comes_from_dataset():
    cfg = config_from_dict(_tiny_doc(detector={"num_classes": 9}))
    trainer = Trainer(cfg, "/tmp/nightshift-classcount")
    assert trainer.state.student.config.num_classes == len(trainer.source.categories)


# ----- structural properties via instrumentation ------------------------------


def test_burn_in_once_and_teacher_untouched_before_it(tmp_path, monkeypatch):
    import nightshift.trainer as trainer_mod
    from nightshift.meanteacher import burn_in_copy as real_burn_in
    from nightshift.meanteacher import ema_update as real_ema

    calls = {"burn_in": 0, "ema": 0}
    fingerprints = {}

    def spy_burn_in(state):
        calls["burn_in"] += 1
        fingerprints["teacher_at_burn_in"] = parameter_checksum(state.teacher)
        return real_burn_in(state)

    def spy_ema(state):
        calls["ema"] += 1
        return real_ema(state)

    monkeypatch.setattr(trainer_mod, "burn_in_copy", spy_burn_in)
    monkeypatch.setattr(trainer_mod, "ema_update", spy_ema)

    cfg = config_from_dict(_tiny_doc())
    trainer = Trainer(cfg, str(tmp_path / "run"))
    fingerprints["teacher_at_init"] = parameter_checksum(trainer.state.teacher)
    trainer.run()

    assert calls["burn_in"] == 1
    assert calls["ema"] == cfg.total_iters - cfg.pretrain_iters
    # optimizer steps during pretraining never leak into the teacher
    assert fingerprints["teacher_at_burn_in"] == fingerprints["teacher_at_init"]
    assert trainer.state.burned_in


@pytest.mark.parametrize("mode", ["full", "mt"])
def test_both_target_branches_share_the_label_filter(tmp_path, monkeypatch, mode):
    import nightshift.trainer as trainer_mod
    from nightshift.config import apply_ablation_mode
    from nightshift.pseudolabel import generate_pseudo_labels as real_gen

    seen = []

    def spy(teacher, image, filter_cfg, iteration):
        seen.append((filter_cfg.tau, filter_cfg.nms_iou))
        return real_gen(teacher, image, filter_cfg, iteration=iteration)

    monkeypatch.setattr(trainer_mod, "generate_pseudo_labels", spy)
    cfg = config_from_dict(apply_ablation_mode(_tiny_doc(), mode))
    train(cfg, str(tmp_path / mode))
    joint_iters = cfg.total_iters - cfg.pretrain_iters
    assert len(seen) == joint_iters * cfg.batch_target
    assert set(seen) == {(cfg.conf_thresh, cfg.pseudo_nms_iou)}


def test_source_mode_never_builds_pseudo_labels(tmp_path, monkeypatch):
    import nightshift.trainer as trainer_mod
    from nightshift.config import apply_ablation_mode

    def boom(*a, **k):
        raise AssertionError("source-only run touched the pseudo-label path")

    monkeypatch.setattr(trainer_mod, "generate_pseudo_labels", boom)
    cfg = config_from_dict(apply_ablation_mode(_tiny_doc(), "source"))
    result = train(cfg, str(tmp_path / "source"))
    iters = [r for r in _read_records(result.metrics_path) if r["type"] == "iter"]
    assert all(r["loss_unsup"] == 0.0 for r in iters)


def test_divergence_aborts_with_named_checkpoint(tmp_path, monkeypatch):
    import nightshift.trainer as trainer_mod

    def poisoned(l_sup, l_unsup, lam):
        return torch.tensor(float("nan"))

    monkeypatch.setattr(trainer_mod, "total_loss", poisoned)
    cfg = config_from_dict(_tiny_doc())
    out = tmp_path / "diverged"
    with pytest.raises(TrainingDiverged, match="iteration 0"):
        train(cfg, str(out))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"].startswith("aborted: TrainingDiverged")
    assert manifest["ended_at"] is not None


def test_all_targets_skipped_still_trains(tmp_path):
    # an impossible confidence bar: every target image is skipped, the run
    # falls back to the supervised loss and still completes
    cfg = config_from_dict(_tiny_doc(conf_thresh=0.999))
    result = train(cfg, str(tmp_path / "skippy"))
    joint = [
        r
        for r in _read_records(result.metrics_path)
        if r["type"] == "iter" and r["phase"] == "joint"
    ]
    assert joint
    for r in joint:
        assert r["skipped_targets"] == cfg.batch_target
        assert r["loss_unsup"] == 0.0
        assert r["pseudo_count"] == 0.0
    assert json.loads(
        (pathlib.Path(result.out_dir) / "manifest.json").read_text()
    )["status"] == "completed"
