import json
import pathlib

import pytest
import torch

from nightshift.config import load_config
from nightshift.detector import DetectorConfig, build_detector
from nightshift.meanteacher import (
    BurnInContractError,
    TeacherStudentState,
    burn_in_copy,
    ema_update,
    load_checkpoint,
    parameter_checksum,
    save_checkpoint,
)

from oracles import ema_closed_form

PRESETS = pathlib.Path(__file__).resolve().parents[1] / "presets"


def _state(burn_in=0, iteration=0, ema_coeff=0.9996, student_seed=0, teacher_seed=1):
    return TeacherStudentState(
        student=build_detector(DetectorConfig(), seed=student_seed),
        teacher=build_detector(DetectorConfig(), seed=teacher_seed),
        iteration=iteration,
        ema_coeff=ema_coeff,
        burn_in_iteration=burn_in,
    )


def _dicts_equal(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    return all(torch.equal(sa[k], sb[k]) for k in sa)


def test_burn_in_copies_bitwise():
    state = _state(burn_in=3, iteration=3)
    assert not _dicts_equal(state.student, state.teacher)
    burn_in_copy(state)
    assert state.burned_in
    assert _dicts_equal(state.student, state.teacher)


def test_burn_in_idempotent():
    state = _state()
    burn_in_copy(state)
    burn_in_copy(state)
    assert _dicts_equal(state.student, state.teacher)


def test_burn_in_rejects_wrong_iteration():
    state = _state(burn_in=10, iteration=4)
    with pytest.raises(BurnInContractError, match="iteration 4"):
        burn_in_copy(state)
    state.iteration = 11
    with pytest.raises(BurnInContractError):
        burn_in_copy(state)


def test_ema_requires_burn_in_first():
    state = _state(burn_in=0, iteration=5)
    with pytest.raises(BurnInContractError):
        ema_update(state)
    burn_in_state = _state(burn_in=0, iteration=0)
    burn_in_copy(burn_in_state)
    # still illegal at the burn-in iteration itself
    with pytest.raises(BurnInContractError):
        ema_update(burn_in_state)


def test_ema_single_step_exact():
    state = _state(ema_coeff=0.9996)
    state.student.double()
    state.teacher.double()
    with torch.no_grad():
        for p in state.student.parameters():
            p.zero_()
        for p in state.teacher.parameters():
            p.fill_(1.0)
    state.burned_in = True
    state.iteration = 1
    ema_update(state)
    for p in state.teacher.parameters():
        assert torch.all(p == 0.9996)


def test_ema_fixed_point():
    state = _state(student_seed=7, teacher_seed=7)  # identical weights
    state.burned_in = True
    state.iteration = 1
    before = {k: v.clone() for k, v in state.teacher.state_dict().items()}
    ema_update(state)
    for k, v in state.teacher.state_dict().items():
        assert torch.allclose(v, before[k], atol=1e-7)


def test_ema_matches_closed_form_after_100_steps():
    beta = 0.98
    state = _state(ema_coeff=beta)
    state.student.double()
    state.teacher.double()
    t0 = {k: v.clone() for k, v in state.teacher.state_dict().items()}
    state.burned_in = True
    for k in range(100):
        state.iteration = k + 1
        ema_update(state)
    s = state.student.state_dict()
    for name, t in state.teacher.state_dict().items():
        expected = ema_closed_form(t0[name], s[name], beta, 100)
        assert torch.allclose(t, expected, atol=1e-10), name


def test_optimizer_never_touches_teacher(scene_pair):
    from nightshift.detector import supervised_loss

    day, _ = scene_pair
    state = _state()
    burn_in_copy(state)
    fingerprint = parameter_checksum(state.teacher)
    opt = torch.optim.SGD(state.student.parameters(), lr=0.05, momentum=0.9)
    for _ in range(3):
        loss, _ = supervised_loss(state.student, day)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert parameter_checksum(state.teacher) == fingerprint
    assert parameter_checksum(state.student) != fingerprint


def test_ema_coeff_validation():
    with pytest.raises(ValueError, match="ema_coeff"):
        _state(ema_coeff=1.0)
    with pytest.raises(ValueError, match="ema_coeff"):
        _state(ema_coeff=0.0)


def test_checkpoint_round_trip(tmp_path):
    state = _state(burn_in=2, iteration=2)
    burn_in_copy(state)
    state.iteration = 9
    ema_update(state)
    blob = str(tmp_path / "ckpt.pt")
    manifest_path = save_checkpoint(
        state, blob, config_hash="cafe01", metrics={"mean_ap": 0.42}
    )
    assert manifest_path == blob + ".json"
    manifest = json.loads(pathlib.Path(manifest_path).read_text())
    assert manifest["iteration"] == 9
    assert manifest["ema_coeff"] == pytest.approx(0.9996)
    assert manifest["burn_in_iteration"] == 2
    assert manifest["burned_in"] is True
    assert manifest["config_hash"] == "cafe01"
    assert manifest["metrics"]["mean_ap"] == pytest.approx(0.42)

    loaded = load_checkpoint(blob)
    assert loaded.iteration == 9
    assert loaded.burned_in
    assert loaded.ema_coeff == pytest.approx(0.9996)
    assert _dicts_equal(loaded.student, state.student)
    assert _dicts_equal(loaded.teacher, state.teacher)


def test_reference_preset_pins_ema_and_schedule():
    cfg = load_config(str(PRESETS / "bdd_reference.json"))
    assert cfg.ema_coeff == pytest.approx(0.9996)
    assert cfg.pretrain_iters == 50000
    assert cfg.total_iters == 100000
    assert cfg.learning_rate == pytest.approx(0.04)
    assert cfg.conf_thresh == pytest.approx(0.8)
    assert cfg.lambda_unsup == pytest.approx(0.3)
