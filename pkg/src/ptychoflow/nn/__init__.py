"""From-scratch convolutional surrogate: layers, Adam, cyclic LR, checkpoints."""

from .checkpoint import (
    CheckpointError,
    IncompatibleCheckpoint,
    ModelCheckpoint,
    load_checkpoint,
    new_checkpoint_id,
    save_checkpoint,
)
from .layers import StateError
from .network import MICRO_SPEC, Network, NetworkSpec, ShapeError
from .optim import AdamState, CyclicLRSchedule, adam_step, cyclic_lr, mae_loss

__all__ = [
    "AdamState",
    "CheckpointError",
    "CyclicLRSchedule",
    "IncompatibleCheckpoint",
    "MICRO_SPEC",
    "ModelCheckpoint",
    "Network",
    "NetworkSpec",
    "ShapeError",
    "StateError",
    "adam_step",
    "cyclic_lr",
    "load_checkpoint",
    "mae_loss",
    "new_checkpoint_id",
    "save_checkpoint",
]
