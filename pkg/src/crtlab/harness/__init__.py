"""Configuration, checkpoints, orchestration and the ``crtlab`` CLI."""

from .checkpoint import Checkpoint, CorruptCheckpointError, load_checkpoint
from .config import RunConfig, default_config, load_config
from .runner import evaluate, sweep_checkpoints, train

__all__ = [
    "Checkpoint",
    "CorruptCheckpointError",
    "RunConfig",
    "default_config",
    "evaluate",
    "load_checkpoint",
    "load_config",
    "sweep_checkpoints",
    "train",
]
