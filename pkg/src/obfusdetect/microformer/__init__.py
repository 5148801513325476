"""Small numpy transformer with generator and discriminator heads."""

from .config import DEFAULT_DROPOUT, DEFAULT_MAX_POSITION, PRESETS, ModelConfig, Role, preset
from .model import (
    Batch,
    ForwardOutput,
    Losses,
    LossSpec,
    Params,
    backward,
    binary_cross_entropy,
    binary_focal,
    cast_params,
    decays,
    forward,
    init_params,
    param_count,
    param_shapes,
    value_and_grad,
)

__all__ = [
    "DEFAULT_DROPOUT", "DEFAULT_MAX_POSITION", "PRESETS", "ModelConfig", "Role", "preset",
    "Batch", "ForwardOutput", "Losses", "LossSpec", "Params", "backward", "binary_focal", "binary_cross_entropy",
    "cast_params", "decays", "forward", "init_params", "param_count", "param_shapes", "value_and_grad",
]

from .checkpoint import CHECKPOINT_VERSION, CheckpointError, load_checkpoint, read_header, save_checkpoint
from .optim import AdamW, linear_schedule

__all__ += [
    "CHECKPOINT_VERSION", "CheckpointError", "load_checkpoint", "read_header", "save_checkpoint",
    "AdamW", "linear_schedule",
]
