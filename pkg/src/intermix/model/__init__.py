"""Step models: the intermixed decoder-only model and the cross-attention baseline."""

from .crossattn import CrossAttentionModel, CrossAttnConfig, cross_attention_loss, cross_attention_peak
from .intermixed import IntermixedModel, ToyModelConfig, collate, early_exit_logits, forward_step, pack_supervision
from .losses import decompose_step_nll, grad, multitask_loss, step_sequence_loss
from .oracle import ScriptedOracle
from .train import CheckpointError, NumericError, TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "CheckpointError",
    "CrossAttentionModel",
    "CrossAttnConfig",
    "IntermixedModel",
    "NumericError",
    "ScriptedOracle",
    "ToyModelConfig",
    "TrainConfig",
    "collate",
    "cross_attention_loss",
    "cross_attention_peak",
    "decompose_step_nll",
    "early_exit_logits",
    "forward_step",
    "grad",
    "load_checkpoint",
    "multitask_loss",
    "pack_supervision",
    "save_checkpoint",
    "step_sequence_loss",
    "train",
]
