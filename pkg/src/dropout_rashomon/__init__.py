"""Dropout-based exploration of Rashomon sets and predictive-multiplicity metrics."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DatasetError,
    IncompatibleSets,
    InvalidArgument,
    SingularMatrixError,
    TrainingDiverged,
)
from .losses import LossKind
from .metrics import MetricsConfig, MetricsReport, ScoreTensor, report
from .models import DropoutSpec, ModelParams, NetworkSpec, apply_dropout, forward, ridge_fit
from .numerics import Rng
from .rashomon import EmpiricalRashomonSet, awp_sampler, dropout_sampler, merge, retrain_to_rashomon
from .training import Dataset, TrainConfig, sgd_train
