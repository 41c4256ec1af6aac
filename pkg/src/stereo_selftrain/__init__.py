"""Consistency-filtered teacher-student self-training for iterative stereo matching."""

from .core import DisparityMap, MultiScalePredictions, PredictionTrace, ReliabilityMap, StereoSample
from .errors import ConfigError, FormatError, StructureMismatchError
from .filters import CsfConfig, SoftThresholdParams, csf_weights, soft_weighted_loss
from .model import IterativeStereoNet, ModelConfig
from .training import SelfTrainConfig, pretrain, run_selftraining

__version__ = "0.1.0"

__all__ = [
    "DisparityMap", "MultiScalePredictions", "PredictionTrace", "ReliabilityMap", "StereoSample",
    "ConfigError", "FormatError", "StructureMismatchError",
    "CsfConfig", "SoftThresholdParams", "csf_weights", "soft_weighted_loss",
    "IterativeStereoNet", "ModelConfig", "SelfTrainConfig", "pretrain", "run_selftraining",
]
