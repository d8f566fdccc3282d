"""Multimodal fusion regressor for graded emotion intensity prediction.

A small, self-contained stack: a numpy autodiff engine, masked attention
layers, a text-anchored fusion model robust to missing modalities, a planted
-signal synthetic data generator, AdamW training with warmup+cosine
scheduling, correlation-based evaluation, and naive oracles to check it all.
"""

from .data import (
    Batch,
    FeatureRecord,
    PlantedConfig,
    PlantedGenerator,
    collate,
    read_manifest,
    read_records,
    write_manifest,
    write_records,
)
from .metrics import EvalResult, evaluate, mse_loss, pearson
from .model import (
    FusionModel,
    ModalityBundle,
    ModelConfig,
    load_checkpoint,
    modality_dropout,
    save_checkpoint,
)
from .optim import (
    AdamWState,
    EarlyStopper,
    Schedule,
    TrainReport,
    TrainSettings,
    TrainState,
    adamw_step,
    clip_global_norm,
    lr_at,
    train_loop,
)
from .tensor import (
    DegenerateMaskError,
    NumericError,
    ShapeMismatchError,
    Tensor,
)

__version__ = "0.1.0"

__all__ = [
    "Batch", "FeatureRecord", "PlantedConfig", "PlantedGenerator",
    "collate", "read_manifest", "read_records", "write_manifest",
    "write_records", "EvalResult", "evaluate", "mse_loss", "pearson",
    "FusionModel", "ModalityBundle", "ModelConfig", "load_checkpoint",
    "modality_dropout", "save_checkpoint", "AdamWState", "EarlyStopper",
    "Schedule", "TrainReport", "TrainSettings", "TrainState", "adamw_step",
    "clip_global_norm", "lr_at", "train_loop", "DegenerateMaskError",
    "NumericError", "ShapeMismatchError", "Tensor",
]
