"""Fine-tuning with calibrated distribution regularization over paired feature banks."""

from drift_tune._backend import NAME as BACKEND
from drift_tune.bank import PairedBanks
from drift_tune.calibration import (
    CalibrationSwitches,
    CalibrationTransform,
    apply_calibration,
    build_transform,
    confidence_weights,
    downstream_class_centers,
    estimate_rotation,
    mmd,
    pretrained_class_centers,
)
from drift_tune.data import (
    Dataset,
    DatasetSplit,
    DriftSpec,
    PairedDataset,
    PretrainConfig,
    load_csv_dataset,
    make_drift_benchmark,
    make_drifted_pair,
    make_gaussian_mixture,
    make_transfer_task,
    pretrain_source,
)
from drift_tune.errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DriftTuneError,
    LabelError,
    NonFiniteError,
    ShapeError,
)
from drift_tune.linalg import matmul, orthogonality_error, svd
from drift_tune.losses import ce_loss, combined_objective, dr_loss, l2sp_penalty
from drift_tune.model import LinearHead, MlpEncoder, load_checkpoint, save_checkpoint
from drift_tune.trainer import TrainConfig, ablation_grid, evaluate, finetune, k_sweep

__version__ = "0.1.0"

__all__ = [
    "apply_calibration",
    "BACKEND",
    "build_transform",
    "CalibrationSwitches",
    "CalibrationTransform",
    "confidence_weights",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "Dataset",
    "DatasetSplit",
    "downstream_class_centers",
    "DriftSpec",
    "DriftTuneError",
    "estimate_rotation",
    "LabelError",
    "load_csv_dataset",
    "make_drift_benchmark",
    "make_drifted_pair",
    "make_gaussian_mixture",
    "make_transfer_task",
    "mmd",
    "NonFiniteError",
    "PairedDataset",
    "pretrain_source",
    "PretrainConfig",
    "pretrained_class_centers",
    "ShapeError",
]
