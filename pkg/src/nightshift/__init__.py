"""Day-to-night domain adaptation for a tiny two-stage detector.

Trains a student detector on labeled day images plus unlabeled night
images: an EMA teacher pseudo-labels the night domain, the student learns
through a merged-proposal consistency loss, day batches carry synthetic
night augmentations, and the student sees progressively rescaled views.
"""

from .config import (
    ABLATION_MODES,
    AblationFlags,
    TrainConfig,
    config_from_dict,
    load_config,
)
from .data import SceneRecipe, SyntheticDataset, FileDataset, generate_pair
from .detector import DetectorConfig, TinyDetector, build_detector, detect
from .errors import (
    ConfigError,
    DataError,
    EmptyProposalsError,
    NumericError,
    SkipBatch,
    TrainingDiverged,
)
from .evaluation import evaluate, evaluate_coco
from .meanteacher import (
    TeacherStudentState,
    burn_in_copy,
    ema_update,
    load_checkpoint,
    save_checkpoint,
)
from .nightaug import NightAugConfig, nightaug_pipeline
from .pseudolabel import FilterConfig, generate_pseudo_labels
from .scaling import ScaleSchedule, sample_scale, scale_inputs, schedule_norm
from .structures import BoxSet, Frame, ImageTensor, LabeledImage, UnlabeledImage
from .trainer import TrainResult, Trainer, total_loss, train
from .twophase import consistency_loss, matched_predict, merge_proposals, unsupervised_loss

__version__ = "0.1.0"

__all__ = [
    "ABLATION_MODES",
    "AblationFlags",
    "BoxSet",
    "ConfigError",
    "DataError",
    "DetectorConfig",
    "EmptyProposalsError",
    "FileDataset",
    "FilterConfig",
    "Frame",
    "ImageTensor",
    "LabeledImage",
    "NightAugConfig",
    "NumericError",
    "SceneRecipe",
    "ScaleSchedule",
    "SkipBatch",
    "SyntheticDataset",
    "TeacherStudentState",
    "TinyDetector",
    "TrainConfig",
    "TrainResult",
    "Trainer",
    "TrainingDiverged",
    "UnlabeledImage",
    "build_detector",
    "burn_in_copy",
    "config_from_dict",
    "consistency_loss",
    "detect",
    "ema_update",
    "evaluate",
    "evaluate_coco",
    "generate_pair",
    "generate_pseudo_labels",
    "load_checkpoint",
    "load_config",
    "matched_predict",
    "merge_proposals",
    "nightaug_pipeline",
    "sample_scale",
    "save_checkpoint",
    "scale_inputs",
    "schedule_norm",
    "total_loss",
    "train",
    "unsupervised_loss",
]
