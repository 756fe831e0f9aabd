"""Differentiable kernels used by the encoder, reconstruction transformer and baselines."""

from .attention import DecoderBlock, EncoderBlock, FeedForward, MultiHeadAttention, attention
from .autograd import backprop, central_difference, gradcheck, relative_error
from .checkpoint import CorruptArtifactError, load_into, load_state, save_checkpoint
from .layers import LayerSpec, build_layer, build_stack, layer_forward, n_trainable
from .optim import AdamW, PlateauScheduler, adamw_step

__all__ = [
    "AdamW",
    "CorruptArtifactError",
    "DecoderBlock",
    "EncoderBlock",
    "FeedForward",
    "LayerSpec",
    "MultiHeadAttention",
    "PlateauScheduler",
    "adamw_step",
    "attention",
    "backprop",
    "build_layer",
    "build_stack",
    "central_difference",
    "gradcheck",
    "layer_forward",
    "load_into",
    "load_state",
    "n_trainable",
    "relative_error",
    "save_checkpoint",
]
