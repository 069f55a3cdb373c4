from .losses import (
    ArchitectureMismatchError,
    ZeroNormError,
    moco_loss,
    momentum_update,
    queue_update,
    simclr_loss,
)
from .models import ARCHITECTURES, ProjectionHead, UnknownArchitectureError, build_encoder
from .training import (
    ContrastiveConfig,
    CorruptCheckpointError,
    EmptySplitError,
    EncoderCheckpoint,
    checkpoint_epochs,
    pretrain_encoder,
    read_log,
)

__all__ = [
    "ARCHITECTURES",
    "ArchitectureMismatchError",
    "ContrastiveConfig",
    "CorruptCheckpointError",
    "EmptySplitError",
    "EncoderCheckpoint",
    "ProjectionHead",
    "UnknownArchitectureError",
    "ZeroNormError",
    "build_encoder",
    "checkpoint_epochs",
    "moco_loss",
    "momentum_update",
    "pretrain_encoder",
    "queue_update",
    "read_log",
    "simclr_loss",
]
