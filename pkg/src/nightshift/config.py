"""Training configuration: schema, file loading, overrides, hashing.

Precedence is defaults < config file < command-line overrides. A config
file is a JSON object mirroring TrainConfig's nesting; overrides use
dotted paths ("ablation.nightaug=false", "learning_rate=0.02") with JSON
literals on the right-hand side where they parse, raw strings otherwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .data import SceneRecipe
from .detector import DetectorConfig
from .errors import ConfigError
from .nightaug import NightAugConfig
from .scaling import ScaleSchedule


@dataclass
class AblationFlags:
    """Which pieces of the method run; all on = the full method.

    unsupervised=False disables the whole target-domain branch (a
    source-only supervised baseline). With unsupervised=True but
    two_phase=False the target branch uses hard pseudo-label
    cross-entropy (the plain teacher-student baseline).
    """

    two_phase: bool = True
    nightaug: bool = True
    student_scaling: bool = True
    unsupervised: bool = True


# named ablation rows, from weakest baseline to the full method
ABLATION_MODES: dict[str, AblationFlags] = {
    "source": AblationFlags(False, False, False, False),
    "mt": AblationFlags(False, False, False, True),
    "mt+c": AblationFlags(True, False, False, True),
    "mt+c+na": AblationFlags(True, True, False, True),
    "full": AblationFlags(True, True, True, True),
}


@dataclass
class SyntheticDataConfig:
    """Fully procedural data: generated on the fly, no files needed."""

    recipe: SceneRecipe = field(default_factory=SceneRecipe)
    source_count: int = 2000
    target_count: int = 2000
    val_count: int = 500
    source_stream: int = 0
    target_stream: int = 1
    val_stream: int = 2

    def validate(self) -> None:
        self.recipe.validate()
        if min(self.source_count, self.target_count, self.val_count) < 1:
            raise ConfigError("synthetic dataset counts must be >= 1")
        streams = (self.source_stream, self.target_stream, self.val_stream)
        if len(set(streams)) != 3:
            raise ConfigError(
                f"synthetic streams must be distinct (got {streams}); identical "
                "streams would reuse the same scenes across splits"
            )


@dataclass
class DataConfig:
    """Where training data comes from: annotation files or synthetic."""

    source_annotations: str = ""
    source_images: str | None = None
    target_annotations: str = ""
    target_images: str | None = None
    val_annotations: str = ""
    val_images: str | None = None
    cache: bool = True
    synthetic: SyntheticDataConfig | None = None

    def validate(self) -> None:
        if self.synthetic is not None:
            self.synthetic.validate()
            return
        if not self.source_annotations or not self.target_annotations:
            raise ConfigError(
                "data needs source_annotations and target_annotations "
                "(or a 'synthetic' block)"
            )


@dataclass
class TrainConfig:
    seed: int = 0
    lambda_unsup: float = 0.3
    ema_coeff: float = 0.9996
    conf_thresh: float = 0.8
    pseudo_nms_iou: float = 0.5
    learning_rate: float = 0.01
    momentum: float = 0.9
    pretrain_iters: int = 2000
    total_iters: int = 5000
    batch_source: int = 6
    batch_target: int = 6
    eval_interval: int = 250
    checkpoint_interval: int = 1000
    resize_target: int = 128
    eval_on: str = "auto"  # teacher after burn-in, student before
    ablation: AblationFlags = field(default_factory=AblationFlags)
    scale_schedule: ScaleSchedule = field(default_factory=ScaleSchedule)
    nightaug: NightAugConfig = field(default_factory=NightAugConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        if self.lambda_unsup < 0:
            raise ConfigError(f"lambda_unsup must be >= 0, got {self.lambda_unsup}")
        if not 0.0 < self.ema_coeff < 1.0:
            raise ConfigError(f"ema_coeff must lie in (0, 1), got {self.ema_coeff}")
        if not 0.0 < self.conf_thresh < 1.0:
            raise ConfigError(f"conf_thresh must lie in (0, 1), got {self.conf_thresh}")
        if not 0.0 < self.pseudo_nms_iou < 1.0:
            raise ConfigError(f"pseudo_nms_iou must lie in (0, 1)")
        if self.pretrain_iters >= self.total_iters:
            raise ConfigError(
                f"pretrain_iters ({self.pretrain_iters}) must be below "
                f"total_iters ({self.total_iters})"
            )
        if self.pretrain_iters < 0:
            raise ConfigError("pretrain_iters must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if min(self.batch_source, self.batch_target) < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.ablation.nightaug and self.batch_source % 2:
            raise ConfigError(
                "batch_source must be even with nightaug on: each source image "
                "contributes a clean and an augmented copy"
            )
        if self.eval_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("intervals must be >= 1")
        if self.eval_on not in ("auto", "teacher", "student"):
            raise ConfigError(f"eval_on must be auto|teacher|student, got {self.eval_on}")
        if self.resize_target < 32:
            raise ConfigError("resize_target must be >= 32")
        self.scale_schedule.validate()
        self.nightaug.validate()
        self.detector.validate()
        self.data.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


_TUPLE_FIELDS = {
    "milestones",
    "scales",
    "channels",
    "anchor_scales",
    "anchor_ratios",
    "brightness_range",
    "contrast_range",
    "gamma_range",
    "noise_sigma_range",
    "blur_sigma_range",
    "glare_peak_range",
    "glare_radius_range",
    "glare_count_range",
    "image_size",
    "object_count",
    "classes",
    "day_bg_brightness",
    "day_gradient",
    "night_gamma",
    "night_darken",
    "night_glare_count",
    "night_glare_radius",
    "night_glare_peak",
    "night_noise_sigma",
}


# nested config sections, keyed by (parent dataclass, field name)
_NESTED = {
    (TrainConfig, "ablation"): AblationFlags,
    (TrainConfig, "scale_schedule"): ScaleSchedule,
    (TrainConfig, "nightaug"): NightAugConfig,
    (TrainConfig, "detector"): DetectorConfig,
    (TrainConfig, "data"): DataConfig,
    (DataConfig, "synthetic"): SyntheticDataConfig,
    (SyntheticDataConfig, "recipe"): SceneRecipe,
}


def _build(cls, d: dict, path: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {path or cls.__name__} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        where = path or cls.__name__
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = path + "." + name if path else name
        target = _NESTED.get((cls, name))
        if target is not None:
            if value is None and cls is DataConfig:
                kwargs[name] = None
            else:
                kwargs[name] = _build(target, value, sub)
        elif name in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad config section {path or cls.__name__}: {e}") from None


def config_from_dict(d: dict) -> TrainConfig:
    cfg = _build(TrainConfig, d, "")
    cfg.validate()
    return cfg


def load_config(path: str, overrides: list[str] | None = None,
                ablation: str | None = None) -> TrainConfig:
    """Read a config file and apply overrides (defaults < file < --set)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if ablation is not None:
        doc = apply_ablation_mode(doc, ablation)
    for item in overrides or []:
        doc = apply_override(doc, item)
    return config_from_dict(doc)


def apply_ablation_mode(doc: dict, mode: str) -> dict:
    if mode not in ABLATION_MODES:
        raise ConfigError(
            f"unknown ablation mode {mode!r}; choose from {sorted(ABLATION_MODES)}"
        )
    doc = dict(doc)
    doc["ablation"] = dataclasses.asdict(ABLATION_MODES[mode])
    return doc


def apply_override(doc: dict, item: str) -> dict:
    """Apply one `key.path=value` override to a raw config dict."""
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"empty override key in {item!r}")
    doc = json.loads(json.dumps(doc))  # deep copy, keeps overrides isolated
    node = doc
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override path {key!r} passes through a scalar")
        node = nxt
    node[parts[-1]] = value
    return doc
