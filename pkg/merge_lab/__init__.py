"""
Merge Lab - a desk-scale lab for weight-averaged model merging.

This package trains pools of small classifiers on synthetic image tasks,
combines them by parameter averaging or output ensembling, and checks the
probabilistic bounds that explain when averaging weights works.

Example:
    from merge_lab.data.synth import DatasetSpec, generate
    from merge_lab.training.trainer import TrainConfig, train_pool
    from merge_lab.merging.operators import ModelPool, uniform_soup
"""

__version__ = "0.3.1"
__author__ = "Merge Lab Contributors"

from merge_lab.errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    DomainError,
    IncompatiblePoolError,
    MergeLabError,
    TrainingDivergedError,
    UnsupportedArchitectureError,
)
from merge_lab.merging.operators import MergeMethod, ModelPool
from merge_lab.models.zoo import Model, ModelMeta

__all__ = [
    # Version info
    "__version__",
    "__author__",

    # Errors
    "MergeLabError",
    "DimensionError",
    "DomainError",
    "IncompatiblePoolError",
    "UnsupportedArchitectureError",
    "TrainingDivergedError",
    "CheckpointError",
    "ConfigError",

    # Core types
    "Model",
    "ModelMeta",
    "ModelPool",
    "MergeMethod",
]
