"""Semi-supervised adversarial segmentation of retinal vessels from small annotation budgets."""

from .dataset import BudgetPlan, DatasetSpec, SamplingConfig, load_dataset, prepare, sample_budget
from .estimator import VesselSegmenter
from .exceptions import (
    ConfigurationError,
    ShapeError,
    TrainingDivergedError,
    UndefinedMetricError,
    VesselGANError,
)
from .imaging import FundusPreprocessor, PreprocessConfig, clahe, extract_patches, gamma_adjust, preprocess, to_weighted_grayscale
from .losses import LossReport
from .metrics import auc_roc
from .nets import Discriminator, Generator, build_discriminator, build_generator
from .trainer import TrainConfig, Trainer

__version__ = "0.1.0"

__all__ = [
    "BudgetPlan", "DatasetSpec", "SamplingConfig", "load_dataset", "prepare", "sample_budget",
    "VesselSegmenter", "ConfigurationError", "ShapeError", "TrainingDivergedError", "UndefinedMetricError",
    "VesselGANError", "FundusPreprocessor", "PreprocessConfig", "clahe", "extract_patches", "gamma_adjust",
    "preprocess", "to_weighted_grayscale", "LossReport", "auc_roc", "Discriminator", "Generator",
    "build_discriminator", "build_generator", "TrainConfig", "Trainer",
]
