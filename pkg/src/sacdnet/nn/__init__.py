"""Minimal float64 neural-network substrate with reverse-mode gradients."""

from .layers import (
    ActivationKind,
    DenseLayer,
    DropoutMode,
    DropoutSpec,
    MultiHeadAttention,
    activation,
    dropout_apply,
    glorot_uniform,
    multi_head_attention,
    scaled_dot_attention,
)
from .optim import Adam, AdamState, adam_step
from .rng import RngStream
from .tensor import (
    Tensor,
    add,
    backward,
    bce_loss,
    concat,
    dropout_mask,
    embedding_lookup,
    masked_mean,
    matmul,
    mul,
    relu,
    reshape,
    scale,
    selu,
    sigmoid,
    softmax_rows,
    tmean,
    tsum,
    zero_grads,
)

__all__ = [
    "ActivationKind",
    "Adam",
    "AdamState",
    "DenseLayer",
    "DropoutMode",
    "DropoutSpec",
    "MultiHeadAttention",
    "RngStream",
    "Tensor",
    "activation",
    "adam_step",
    "add",
    "backward",
    "bce_loss",
    "concat",
    "dropout_apply",
    "dropout_mask",
    "embedding_lookup",
    "glorot_uniform",
    "masked_mean",
    "matmul",
    "mul",
    "multi_head_attention",
    "relu",
    "reshape",
    "scale",
    "scaled_dot_attention",
    "selu",
    "sigmoid",
    "softmax_rows",
    "tmean",
    "tsum",
    "zero_grads",
]
