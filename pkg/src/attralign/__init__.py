"""Desk-scale lab for attribute-augmented alignment.

Contrastive alignment of object, attribute, and category embeddings with
hard negatives, a two-stage training driver, diagnostic metrics, and an
attribute-description construction pipeline over pluggable endpoints.
"""

__version__ = "0.1.0"

from .dataset import (
    AlignmentDataset,
    CategoryTable,
    PoolingMode,
    SampleTriple,
    Split,
    SynthConfig,
    generate_synthetic,
    pool,
)
from .losses import BatchViews, LossReport, stage1_objective
from .mining import HardNegativeSet, mine
from .model import ClassifierHead, ProjectionModel, adam_step, forward
from .numerics import Matrix, Tape, Vector, backward, cosine_sim, log_sum_exp
from .training import RunRecord, TrainConfig, TrainMode, ablation_suite, train

__all__ = [
    "AlignmentDataset", "BatchViews", "CategoryTable", "ClassifierHead",
    "HardNegativeSet", "LossReport", "Matrix", "PoolingMode",
    "ProjectionModel", "RunRecord", "SampleTriple", "Split", "SynthConfig",
    "Tape", "TrainConfig", "TrainMode", "Vector", "ablation_suite",
    "adam_step", "backward", "cosine_sim", "forward", "generate_synthetic",
    "log_sum_exp", "mine", "pool", "stage1_objective", "train",
]
