"""The full training loop: pretrain, burn-in, joint teacher-student phase.

Phase layout over total_iters iterations:

  [0, pretrain_iters)           supervised only, day images (clean +
                                night-augmented copies share each batch)
  pretrain_iters                student weights copied into the teacher
  [pretrain_iters, total_iters) supervised batch as before, plus the
                                target-domain branch: teacher pseudo-labels
                                at full scale, student trains on a scaled
                                view through merged-proposal consistency
                                (or hard pseudo-labels in baseline mode)

Each iteration ends with an SGD step on the student followed by an EMA
update of the teacher; the teacher is never touched by the optimizer.
All randomness derives from the single config seed: numpy streams for data
order / augmentation / scale draws, one torch generator for loss-internal
sampling, and a torch seed for weight init, so a run replays bit-for-bit.

Artifacts land in the output directory: metrics.jsonl (line-delimited
records, one per iteration plus tagged eval records), periodic checkpoints
with JSON manifests, and a run manifest written before training and
finalized on every exit path, aborts included.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
import torch

from .config import TrainConfig
from .data import (
    EpochSampler,
    FileDataset,
    LabeledImage,
    SyntheticDataset,
    resize_shorter_side,
)
from .detector import build_detector, detect, rpn_propose, supervised_loss
from .errors import SkipBatch, TrainingDiverged
from .evaluation import DEFAULT_AREA_BOUNDS, evaluate
from .meanteacher import (
    TeacherStudentState,
    burn_in_copy,
    ema_update,
    save_checkpoint,
)
from .nightaug import nightaug_pipeline
from .pseudolabel import FilterConfig, generate_pseudo_labels
from .scaling import (
    map_proposals,
    sample_scale,
    scale_inputs,
    scaled_area_keep_mask,
    schedule_norm,
)
from .structures import BoxSet, ImageTensor
from .twophase import (
    hard_label_loss,
    matched_predict,
    merge_proposals,
    unsupervised_loss,
)

log = logging.getLogger("nightshift.trainer")

# keys every per-iteration metrics record carries, always finite
ITER_METRIC_KEYS = (
    "loss_total",
    "loss_sup",
    "loss_unsup",
    "loss_rpn_obj",
    "loss_cons",
    "alpha_mean",
    "pseudo_count",
    "scale_mean",
    "skipped_targets",
)


@dataclass
class RunManifest:
    """Everything needed to replay and audit a run."""

    config: dict
    seed: int
    config_hash: str
    started_at: str
    status: str = "running"
    ended_at: str | None = None
    artifacts: dict[str, str] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class TrainResult:
    out_dir: str
    final_checkpoint: str
    metrics_path: str
    manifest_path: str
    eval_history: list[dict]
    state: TeacherStudentState

    @property
    def final_ap50(self) -> float:
        return self.eval_history[-1]["mean_ap"] if self.eval_history else float("nan")

    @property
    def peak_ap50(self) -> float:
        return (
            max(r["mean_ap"] for r in self.eval_history)
            if self.eval_history
            else float("nan")
        )


def total_loss(l_sup, l_unsup, lam: float):
    """L_total = L_sup + lambda * L_unsup; a skipped batch contributes nothing."""
    if l_unsup is None:
        return l_sup
    return l_sup + lam * l_unsup


def build_datasets(cfg: TrainConfig):
    """(source labeled, target unlabeled, val labeled or None) from config."""
    d = cfg.data
    if d.synthetic is not None:
        s = d.synthetic
        source = SyntheticDataset(
            s.recipe, s.source_count, "day", stream=s.source_stream, labeled=True,
            id_prefix="day",
        )
        target = SyntheticDataset(
            s.recipe, s.target_count, "night", stream=s.target_stream, labeled=False,
            id_prefix="night",
        )
        val = SyntheticDataset(
            s.recipe, s.val_count, "night", stream=s.val_stream, labeled=True,
            id_prefix="val", cache=d.cache,
        )
        return source, target, val
    source = FileDataset(d.source_annotations, d.source_images)
    target = FileDataset(d.target_annotations, d.target_images)
    val = None
    if d.val_annotations:
        val = FileDataset(d.val_annotations, d.val_images, cache=d.cache)
    return source, target, val


def _resized_labeled(sample: LabeledImage, target: int) -> LabeledImage:
    if min(sample.image.height, sample.image.width) == target:
        return sample
    image, boxes = resize_shorter_side(sample.image, sample.boxes, target)
    return LabeledImage(image=image, boxes=boxes, image_id=sample.image_id)


def _resized_image(image: ImageTensor, target: int) -> ImageTensor:
    if min(image.height, image.width) == target:
        return image
    out, _ = resize_shorter_side(image, None, target)
    return out


def predict_dataset(model, dataset, resize_target: int) -> tuple[list[BoxSet], list[BoxSet]]:
    """Run inference over a labeled dataset; returns (detections, ground truth)."""
    dets, gts = [], []
    for i in range(len(dataset)):
        sample = _resized_labeled(dataset[i], resize_target)
        dets.append(detect(model, sample.image))
        gts.append(sample.boxes)
    return dets, gts


class Trainer:
    def __init__(self, cfg: TrainConfig, out_dir: str, source=None, target=None, val=None):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)

        if source is None or target is None:
            built_source, built_target, built_val = build_datasets(cfg)
            source = source or built_source
            target = target or built_target
            val = val if val is not None else built_val
        self.source, self.target, self.val = source, target, val

        # the class count is a dataset property, not a config guess
        k = len(getattr(source, "categories", {})) or cfg.detector.num_classes
        if k != cfg.detector.num_classes:
            cfg.detector = dataclasses.replace(cfg.detector, num_classes=k)

        root = np.random.SeedSequence(cfg.seed)
        ss_torch, ss_src, ss_tgt, ss_aug, ss_scale, ss_sample = root.spawn(6)
        torch_seed = int(ss_torch.generate_state(1)[0])
        self.src_rng = np.random.default_rng(ss_src)
        self.tgt_rng = np.random.default_rng(ss_tgt)
        self.aug_rng = np.random.default_rng(ss_aug)
        self.scale_rng = np.random.default_rng(ss_scale)
        self.torch_gen = torch.Generator()
        self.torch_gen.manual_seed(int(ss_sample.generate_state(1)[0]))

        student = build_detector(cfg.detector, torch_seed)
        teacher = build_detector(cfg.detector, torch_seed)
        self.state = TeacherStudentState(
            student=student,
            teacher=teacher,
            iteration=0,
            ema_coeff=cfg.ema_coeff,
            burn_in_iteration=cfg.pretrain_iters,
        )
        self.optimizer = torch.optim.SGD(
            student.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum
        )
        self.filter_cfg = FilterConfig(tau=cfg.conf_thresh, nms_iou=cfg.pseudo_nms_iou)
        self.src_sampler = EpochSampler(len(source), self.src_rng)
        self.tgt_sampler = EpochSampler(len(target), self.tgt_rng)
        self.eval_history: list[dict] = []
        self.last_checkpoint: str | None = None

    # ----- loss assembly ---------------------------------------------------

    def _supervised_batch(self):
        cfg = self.cfg
        use_aug = cfg.ablation.nightaug
        n_images = cfg.batch_source // 2 if use_aug else cfg.batch_source
        losses = []
        for idx in self.src_sampler.next(n_images):
            sample = _resized_labeled(self.source[idx], cfg.resize_target)
            copies = [sample.image]
            if use_aug:
                copies.append(
                    nightaug_pipeline(sample.image, cfg.nightaug, self.aug_rng)
                )
            for image in copies:
                view = LabeledImage(image=image, boxes=sample.boxes, image_id=sample.image_id)
                loss, _ = supervised_loss(self.state.student, view, self.torch_gen)
                losses.append(loss)
        return torch.stack(losses).mean()

    def _unsupervised_batch(self, iteration: int):
        """Mean target-domain loss; returns (loss or None, stats dict)."""
        cfg = self.cfg
        stats = {
            "loss_rpn_obj": 0.0,
            "loss_cons": 0.0,
            "alpha_mean": 0.0,
            "pseudo_count": 0.0,
            "scale_mean": 0.0,
            "skipped_targets": 0.0,
        }
        losses, parts_list, scales = [], [], []
        for idx in self.tgt_sampler.next(cfg.batch_target):
            sample = self.target[idx]
            image = _resized_image(sample.image, cfg.resize_target)

            pseudo = generate_pseudo_labels(
                self.state.teacher, image, self.filter_cfg, iteration=iteration
            )
            progress = iteration / cfg.total_iters
            if cfg.ablation.student_scaling:
                norm = schedule_norm(progress, cfg.scale_schedule)
                scale = sample_scale(
                    norm,
                    cfg.scale_schedule.gaussian_sigma,
                    self.scale_rng,
                    cfg.scale_schedule.min_scale,
                )
            else:
                scale = 1.0
            scales.append(scale)
            if len(pseudo) == 0:
                stats["skipped_targets"] += 1
                continue
            view, scaled_pseudo = scale_inputs(
                image, pseudo, scale, cfg.scale_schedule.min_box_area
            )
            if len(scaled_pseudo) == 0:
                stats["skipped_targets"] += 1
                continue
            try:
                if cfg.ablation.two_phase:
                    keep = scaled_area_keep_mask(
                        pseudo.labels.xyxy, scale, cfg.scale_schedule.min_box_area
                    )
                    pseudo_full = dataclasses.replace(
                        pseudo, labels=pseudo.labels.select(keep)
                    )
                    # student proposals come from the scaled view, mapped
                    # back to the full frame where the merge happens
                    props = map_proposals(
                        rpn_propose(self.state.student, view.image), image.frame
                    )
                    merged = merge_proposals(props, pseudo_full)
                    m = matched_predict(
                        self.state.student,
                        self.state.teacher,
                        view.image,
                        image,
                        merged,
                    )
                    loss, parts = unsupervised_loss(
                        self.state.student, m, scaled_pseudo, view.image, self.torch_gen
                    )
                else:
                    loss, parts = hard_label_loss(
                        self.state.student, scaled_pseudo, view.image, self.torch_gen
                    )
            except SkipBatch:
                stats["skipped_targets"] += 1
                continue
            losses.append(loss)
            parts_list.append(parts)

        stats["scale_mean"] = float(np.mean(scales)) if scales else 1.0
        if not losses:
            return None, stats
        for key, src in (
            ("loss_rpn_obj", "rpn_obj"),
            ("loss_cons", "cons"),
            ("alpha_mean", "alpha_mean"),
            ("pseudo_count", "pseudo_count"),
        ):
            stats[key] = float(np.mean([p[src] for p in parts_list]))
        return torch.stack(losses).mean(), stats

    # ----- evaluation and checkpointing ------------------------------------

    def _eval_model(self):
        if self.cfg.eval_on == "teacher":
            return self.state.teacher, "teacher"
        if self.cfg.eval_on == "student":
            return self.state.student, "student"
        if self.state.burned_in:
            return self.state.teacher, "teacher"
        return self.state.student, "student"

    def _run_eval(self, iteration: int, metrics_fh) -> None:
        if self.val is None:
            return
        model, which = self._eval_model()
        model.eval()
        dets, gts = predict_dataset(model, self.val, self.cfg.resize_target)
        model.train()
        result = evaluate(dets, gts, 0.5, DEFAULT_AREA_BOUNDS)
        record = {
            "type": "eval",
            "iteration": iteration,
            "model": which,
            "mean_ap": result.mean_ap,
            "ap_small": result.ap_small,
            "ap_medium": result.ap_medium,
            "ap_large": result.ap_large,
            "ap_per_class": {str(k): v for k, v in result.ap_per_class.items()},
        }
        self.eval_history.append(record)
        metrics_fh.write(json.dumps(record) + "\n")
        metrics_fh.flush()
        log.info(
            "iter %d eval(%s): AP50=%.4f APs=%s APm=%s APl=%s",
            iteration,
            which,
            result.mean_ap,
            f"{result.ap_small:.4f}" if result.ap_small is not None else "n/a",
            f"{result.ap_medium:.4f}" if result.ap_medium is not None else "n/a",
            f"{result.ap_large:.4f}" if result.ap_large is not None else "n/a",
        )

    def _save_checkpoint(self, tag: str) -> str:
        path = os.path.join(self.out_dir, f"checkpoint_{tag}.pt")
        summary = self.eval_history[-1] if self.eval_history else {}
        save_checkpoint(
            self.state,
            path,
            config_hash=self.cfg.config_hash(),
            metrics={k: v for k, v in summary.items() if k != "type"},
        )
        self.last_checkpoint = path
        return path

    # ----- main loop --------------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.cfg
        metrics_path = os.path.join(self.out_dir, "metrics.jsonl")
        manifest_path = os.path.join(self.out_dir, "manifest.json")
        manifest = RunManifest(
            config=cfg.to_dict(),
            seed=cfg.seed,
            config_hash=cfg.config_hash(),
            started_at=datetime.now(timezone.utc).isoformat(),
            artifacts={"metrics": "metrics.jsonl"},
        )
        manifest.write(manifest_path)

        status = "completed"
        try:
            with open(metrics_path, "w", encoding="utf-8") as fh:
                self._loop(fh)
        except BaseException as e:
            status = f"aborted: {type(e).__name__}: {e}"
            raise
        finally:
            manifest.status = status
            manifest.ended_at = datetime.now(timezone.utc).isoformat()
            if self.last_checkpoint:
                manifest.artifacts["final_checkpoint"] = os.path.basename(
                    self.last_checkpoint
                )
            if self.eval_history:
                manifest.summary = {
                    "final": self.eval_history[-1],
                    "peak_mean_ap": max(r["mean_ap"] for r in self.eval_history),
                }
            manifest.write(manifest_path)

        return TrainResult(
            out_dir=self.out_dir,
            final_checkpoint=self.last_checkpoint or "",
            metrics_path=metrics_path,
            manifest_path=manifest_path,
            eval_history=self.eval_history,
            state=self.state,
        )

    def _loop(self, metrics_fh) -> None:
        cfg = self.cfg
        for it in range(cfg.total_iters):
            if it == cfg.pretrain_iters:
                burn_in_copy(self.state)
                log.info("iter %d: burn-in copy (student -> teacher)", it)

            l_sup = self._supervised_batch()
            l_unsup, stats = (None, None)
            if cfg.ablation.unsupervised and it >= cfg.pretrain_iters:
                l_unsup, stats = self._unsupervised_batch(it)
            total = total_loss(l_sup, l_unsup, cfg.lambda_unsup)

            if not torch.isfinite(total):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it}; last good checkpoint: "
                    f"{self.last_checkpoint or '<none written yet>'}"
                )

            self.optimizer.zero_grad()
            total.backward()
            self.optimizer.step()
            self.state.iteration = it + 1
            if self.state.burned_in:
                ema_update(self.state)

            record = {
                "type": "iter",
                "iteration": it,
                "phase": "pretrain" if it < cfg.pretrain_iters else "joint",
                "loss_total": float(total.detach()),
                "loss_sup": float(l_sup.detach()),
                "loss_unsup": float(l_unsup.detach()) if l_unsup is not None else 0.0,
            }
            base = dict.fromkeys(ITER_METRIC_KEYS, 0.0)
            base.update({k: v for k, v in record.items() if k in ITER_METRIC_KEYS})
            if stats:
                base.update(stats)
            record.update(base)
            metrics_fh.write(json.dumps(record) + "\n")

            done = it + 1
            if done % cfg.eval_interval == 0 or done == cfg.total_iters:
                metrics_fh.flush()
                self._run_eval(done, metrics_fh)
            if done % cfg.checkpoint_interval == 0:
                self._save_checkpoint(f"iter{done:06d}")
        self._save_checkpoint("final")


def train(cfg: TrainConfig, out_dir: str, source=None, target=None, val=None) -> TrainResult:
    """Train per config, writing all artifacts under out_dir."""
    return Trainer(cfg, out_dir, source=source, target=target, val=val).run()
