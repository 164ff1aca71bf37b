"""Teacher-student weight coupling: burn-in copy and EMA updates.

The student trains by gradient descent; the teacher's weights are the
exponential moving average of the student's and are never touched by the
optimizer. At the end of the supervised pretraining phase the student's
weights are copied into the teacher (burn-in); every iteration afterwards
applies teacher' = beta * teacher + (1 - beta) * student elementwise, so a
constant student decays the gap geometrically:

    teacher_k = student + beta**k * (teacher_0 - student)

Checkpoints serialize both parameter sets plus a small JSON manifest
(iteration, EMA coefficient, config hash, metric summary) next to the blob.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import torch

from .detector import DetectorConfig, TinyDetector
from .errors import NumericError


class BurnInContractError(RuntimeError):
    """burn_in_copy was invoked at an iteration other than the configured one."""


@dataclass
class TeacherStudentState:
    """The paired models plus the bookkeeping the update rules depend on."""

    student: TinyDetector
    teacher: TinyDetector
    iteration: int = 0
    ema_coeff: float = 0.9996
    burn_in_iteration: int = 0
    burned_in: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.ema_coeff < 1.0:
            raise ValueError(f"ema_coeff must lie in (0, 1), got {self.ema_coeff}")
        s_shapes = [tuple(p.shape) for p in self.student.parameters()]
        t_shapes = [tuple(p.shape) for p in self.teacher.parameters()]
        if s_shapes != t_shapes:
            raise ValueError("student and teacher parameter partitions differ")


def burn_in_copy(state: TeacherStudentState) -> TeacherStudentState:
    """Copy student weights into the teacher, bit for bit.

    Only legal exactly at the configured burn-in iteration; idempotent there.
    """
    if state.iteration != state.burn_in_iteration:
        raise BurnInContractError(
            f"burn-in copy requested at iteration {state.iteration}, "
            f"configured for {state.burn_in_iteration}"
        )
    state.teacher.load_state_dict(state.student.state_dict())
    state.burned_in = True
    return state


@torch.no_grad()
def ema_update(state: TeacherStudentState) -> TeacherStudentState:
    """One EMA step: teacher' = beta * teacher + (1 - beta) * student."""
    if not state.burned_in or state.iteration <= state.burn_in_iteration:
        raise BurnInContractError(
            f"EMA update at iteration {state.iteration} precedes burn-in "
            f"({state.burn_in_iteration})"
        )
    beta = state.ema_coeff
    s_params = dict(state.student.state_dict())
    for name, t in state.teacher.state_dict().items():
        s = s_params[name]
        if not torch.is_floating_point(t):
            t.copy_(s)
            continue
        t.mul_(beta).add_(s, alpha=1.0 - beta)
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite teacher parameters in {name!r} after EMA")
    return state


def parameter_checksum(model: TinyDetector) -> float:
    """Cheap fingerprint used to assert the optimizer never touches the teacher."""
    with torch.no_grad():
        return float(
            sum(p.double().abs().sum() for p in model.state_dict().values())
        )


def save_checkpoint(
    state: TeacherStudentState,
    path: str,
    config_hash: str = "",
    metrics: dict | None = None,
    extra: dict | None = None,
) -> str:
    """Write the parameter blob and its JSON manifest; returns manifest path.

    The blob at `path` holds both state dicts and the detector config; the
    manifest at `path + ".json"` is human-readable and schema-stable:
    {"iteration", "ema_coeff", "burn_in_iteration", "burned_in",
     "config_hash", "num_classes", "metrics"}.
    """
    payload = {
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "detector_config": vars(state.student.config),
        "iteration": state.iteration,
        "ema_coeff": state.ema_coeff,
        "burn_in_iteration": state.burn_in_iteration,
        "burned_in": state.burned_in,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    manifest = {
        "iteration": state.iteration,
        "ema_coeff": state.ema_coeff,
        "burn_in_iteration": state.burn_in_iteration,
        "burned_in": state.burned_in,
        "config_hash": config_hash,
        "num_classes": state.student.config.num_classes,
        "metrics": metrics or {},
        "blob_file": os.path.basename(path),
    }
    manifest_path = path + ".json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_checkpoint(path: str) -> TeacherStudentState:
    """Rebuild a TeacherStudentState from a checkpoint blob."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg_fields = dict(payload["detector_config"])
    for key in ("channels", "anchor_scales", "anchor_ratios"):
        if key in cfg_fields and isinstance(cfg_fields[key], list):
            cfg_fields[key] = tuple(cfg_fields[key])
    cfg = DetectorConfig(**cfg_fields)
    student = TinyDetector(cfg)
    teacher = TinyDetector(cfg)
    student.load_state_dict(payload["student"])
    teacher.load_state_dict(payload["teacher"])
    return TeacherStudentState(
        student=student,
        teacher=teacher,
        iteration=int(payload["iteration"]),
        ema_coeff=float(payload["ema_coeff"]),
        burn_in_iteration=int(payload["burn_in_iteration"]),
        burned_in=bool(payload["burned_in"]),
    )
