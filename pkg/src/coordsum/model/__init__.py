"""Sequence-to-sequence transformer: forward passes, losses, checkpoints."""
from .transformer import (
    ModelConfig,
    ModelError,
    TransformerScorer,
    const_parameters,
    count_parameters,
    decode_logprobs,
    encode,
    forward_teacher_forced,
    init_parameters,
    next_token_distribution,
    parameter_shapes,
    wrap_parameters,
)
from .losses import smoothed_target, xent_label_smoothed
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    checkpoint_bytes,
    load_checkpoint,
    save_checkpoint,
    validate_checkpoint,
)

__all__ = [
    "ModelConfig",
    "ModelError",
    "TransformerScorer",
    "const_parameters",
    "count_parameters",
    "decode_logprobs",
    "encode",
    "forward_teacher_forced",
    "init_parameters",
    "next_token_distribution",
    "parameter_shapes",
    "wrap_parameters",
    "smoothed_target",
    "xent_label_smoothed",
    "Checkpoint",
    "CheckpointError",
    "checkpoint_bytes",
    "load_checkpoint",
    "save_checkpoint",
    "validate_checkpoint",
]
