"""Small numpy neural-network engine for the 2D, 2.5D and 3D classification paths."""
from .gradcheck import grad_check
from .losses import bce_multilabel, loss_multilabel_bce
from .model import (
    PRESETS,
    REPRESENTATIONS,
    Checkpoint,
    Model,
    ModelSpec,
    forward,
    load_checkpoint,
    resource_report,
    save_checkpoint,
    tiny2d,
    tiny2p5d,
    tiny3d,
)
from .optim import AdamW, EarlyStopping, PlateauScheduler, optimizer_step
from .train import ArrayDataset, TrainConfig, TrainingLog, TrainState, train

__all__ = [
    "PRESETS",
    "REPRESENTATIONS",
    "AdamW",
    "ArrayDataset",
    "Checkpoint",
    "EarlyStopping",
    "Model",
    "ModelSpec",
    "PlateauScheduler",
    "TrainConfig",
    "TrainState",
    "TrainingLog",
    "bce_multilabel",
    "forward",
    "grad_check",
    "load_checkpoint",
    "loss_multilabel_bce",
    "optimizer_step",
    "resource_report",
    "save_checkpoint",
    "tiny2d",
    "tiny2p5d",
    "tiny3d",
    "train",
]
