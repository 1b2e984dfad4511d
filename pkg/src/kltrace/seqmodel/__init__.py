"""Sequence models, training, checkpoints, and gradient verification."""

from kltrace.seqmodel.network import (
    VARIANTS,
    REVEAL_MODES,
    DecodeOrder,
    FlowModel,
    LogitsGrid,
    MaskSpec,
    ModelConfig,
    RolloutResult,
    init_model,
    make_mask,
    make_order,
)
from kltrace.seqmodel.checkpoint import Checkpoint
from kltrace.seqmodel.train import (
    TokenizedDataset,
    TrainResult,
    TrainSettings,
    batch_loss,
    conditioned_ce,
    heldout_loss,
    train,
)
from kltrace.seqmodel.gradcheck import grad_check, head_bias_grad_closed_form, make_toy_batch

__all__ = [
    "VARIANTS",
    "REVEAL_MODES",
    "DecodeOrder",
    "FlowModel",
    "LogitsGrid",
    "MaskSpec",
    "ModelConfig",
    "RolloutResult",
    "init_model",
    "make_mask",
    "make_order",
    "Checkpoint",
    "TokenizedDataset",
    "TrainResult",
    "TrainSettings",
    "batch_loss",
    "conditioned_ce",
    "heldout_loss",
    "train",
    "grad_check",
    "head_bias_grad_closed_form",
    "make_toy_batch",
]
