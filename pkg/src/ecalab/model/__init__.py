from .checkpoint import CheckpointFormatError, ModelCheckpoint, load_checkpoint, save_checkpoint
from .train import (
    TASK_SCHEDULES,
    FrozenWeightDriftError,
    NumericalDivergenceError,
    TrainConfig,
    TrainHistory,
    efficiency,
    evaluate,
    finetune_frozen,
    lr_at,
    train_pretrain,
)
from .transformer import HeadSpec, ModelConfig, Transformer, backbone_hash

__all__ = [
    "CheckpointFormatError",
    "FrozenWeightDriftError",
    "HeadSpec",
    "ModelCheckpoint",
    "ModelConfig",
    "NumericalDivergenceError",
    "TASK_SCHEDULES",
    "TrainConfig",
    "TrainHistory",
    "Transformer",
    "backbone_hash",
    "efficiency",
    "evaluate",
    "finetune_frozen",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
    "train_pretrain",
]
