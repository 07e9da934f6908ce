"""Rotation-invariant masked point modeling on a small numpy autodiff engine."""

from .canonicalize import pca_canonicalize, relative_rotation, relative_rotations
from .config import Config, desk_config, load_config, full_config
from .estimators import RIMAE, RIMAEClassifier
from .exceptions import DegenerateFrame, DimensionError, NumericError, UsageError
from .geometry import PointCloud, fps, knn_patch, make_patches, random_rotation
from .invariance import eval_invariance
from .mae import ae_baseline_step, init_state, make_mask
from .synthetic import make_dataset
from .train import evaluate_scenario, few_shot_eval, pretrain

__version__ = "0.1.0"

__all__ = [
    "Config", "DegenerateFrame", "DimensionError", "NumericError", "PointCloud", "RIMAE",
    "RIMAEClassifier", "UsageError", "ae_baseline_step", "desk_config", "eval_invariance",
    "evaluate_scenario", "few_shot_eval", "fps", "init_state", "knn_patch", "load_config",
    "make_dataset", "make_mask", "make_patches", "full_config", "pca_canonicalize",
    "pretrain", "random_rotation", "relative_rotation", "relative_rotations",
]
