"""Semi-supervised conditional normalizing flow for joint imputation and classification."""

from .data import IncompleteDataset, inject_mcar, load_csv, make_folds, normalize
from .model import (
    SSCFlowModel,
    TrainConfig,
    impute_and_classify,
    predict_batch,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "IncompleteDataset",
    "SSCFlowModel",
    "TrainConfig",
    "impute_and_classify",
    "inject_mcar",
    "load_csv",
    "make_folds",
    "normalize",
    "predict_batch",
    "train",
]
