"""Network building blocks: dense layers, dropout, scaled dot-product
attention, and multi-head self-attention.

All blocks operate on :class:`~sacdnet.nn.tensor.Tensor` and record to
the gradient tape. Attention accepts a single sequence ``[L, d]`` or a
stacked batch ``[B, L, d]``; masks mark valid positions and masked
positions receive a score of ``MASK_SCORE`` before the softmax, which
underflows to an exact zero weight.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .rng import RngStream
from .tensor import (
    Tensor,
    _make_node,
    add,
    concat,
    dropout_mask,
    matmul,
    relu,
    scale,
    selu,
    sigmoid,
    softmax_rows,
)

# Large negative score for masked attention positions. Finite so the
# score tensor stays finite, yet far enough below any real score that
# exp(score - rowmax) underflows to exactly 0.
MASK_SCORE = -1e30


class ActivationKind(str, enum.Enum):
    SELU = "selu"
    RELU = "relu"
    SIGMOID = "sigmoid"
    NONE = "none"


def activation(kind: ActivationKind, x: Tensor) -> Tensor:
    """Apply an elementwise activation by kind."""
    if kind == ActivationKind.SELU:
        return selu(x)
    if kind == ActivationKind.RELU:
        return relu(x)
    if kind == ActivationKind.SIGMOID:
        return sigmoid(x)
    if kind == ActivationKind.NONE:
        return x
    raise ValueError(f"unknown activation kind: {kind!r}")


def glorot_uniform(rng: RngStream, fan_in: int, fan_out: int,
                   shape: Sequence[int]) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))


@dataclass
class DenseLayer:
    """Fully connected layer: ``act(x @ weights + bias)``."""

    weights: Tensor
    bias: Tensor
    activation: ActivationKind = ActivationKind.NONE

    @classmethod
    def create(cls, in_dim: int, out_dim: int, act: ActivationKind,
               rng: RngStream) -> "DenseLayer":
        if in_dim < 1 or out_dim < 1:
            raise ValueError("dense layer dims must be >= 1")
        w = Tensor(glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim)),
                   requires_grad=True)
        b = Tensor(np.zeros(out_dim), requires_grad=True)
        return cls(weights=w, bias=b, activation=act)

    def __call__(self, x: Tensor) -> Tensor:
        return activation(self.activation, add(matmul(x, self.weights), self.bias))

    def parameters(self) -> List[Tensor]:
        return [self.weights, self.bias]


class DropoutMode(str, enum.Enum):
    TRAIN = "train"
    INFERENCE_ACTIVE = "inference-active"
    INFERENCE_OFF = "inference-off"


@dataclass(frozen=True)
class DropoutSpec:
    """Dropout configuration; in inference-off mode the layer is identity."""

    rate: float
    mode: DropoutMode = DropoutMode.TRAIN

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    def with_mode(self, mode: DropoutMode) -> "DropoutSpec":
        return DropoutSpec(self.rate, mode)


def dropout_apply(spec: DropoutSpec, x: Tensor, rng: Optional[RngStream]) -> Tensor:
    """Inverted dropout: zero each element w.p. ``rate``, scale survivors.

    Identity (the same tensor, bitwise) in inference-off mode or at rate
    zero; otherwise draws a reproducible mask from ``rng``.
    """
    if spec.mode == DropoutMode.INFERENCE_OFF or spec.rate == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout needs an RngStream")
    keep = rng.random(size=x.shape) >= spec.rate
    return dropout_mask(x, keep, spec.rate)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention: ``softmax(q kᵀ / sqrt(d_k)) v``.

    ``q``/``k``/``v`` are ``[L, d]`` or stacked ``[B, L, d]``; ``mask``
    (same leading shape, length L) marks valid positions. Invalid key
    positions are excluded from every query's distribution. Each output
    row is a convex combination of valid ``v`` rows.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if q.shape[:-1] != k.shape[:-1] or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(
            f"sequence shapes differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if mask is None:
        mask = np.ones(q.shape[:-1], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != q.shape[:-1]:
            raise ValueError(f"mask shape {mask.shape} != sequence shape {q.shape[:-1]}")
    if not mask.any(axis=-1).all():
        raise ValueError("attention: a sequence has every position masked")

    d_k = k.shape[-1]
    scores = scale(matmul(q, _transpose_last(k)), 1.0 / np.sqrt(d_k))
    # additive key-axis bias: [..., 1, L] broadcast over the query axis
    bias = np.where(mask, 0.0, MASK_SCORE)[..., None, :]
    scores = add(scores, Tensor(bias))
    weights = softmax_rows(scores)
    return matmul(weights, v)


def _transpose_last(t: Tensor) -> Tensor:
    """Swap the last two axes (graph-recorded)."""
    data = np.swapaxes(t.data, -1, -2)

    def vjp(g: np.ndarray):
        return [(t, np.swapaxes(g, -1, -2))]

    return _make_node(data, (t,), vjp)


@dataclass
class MultiHeadAttention:
    """Self-attention with per-head projections and an output projection.

    Head ``i`` projects the input with its own query/key/value weights,
    runs scaled dot-product attention, and the concatenated head outputs
    are mapped through ``w_out``.
    """

    num_heads: int
    d_q: int
    d_k: int
    d_v: int
    w_query: List[Tensor] = field(default_factory=list)  # each [d_model, d_q]
    w_key: List[Tensor] = field(default_factory=list)    # each [d_model, d_k]
    w_value: List[Tensor] = field(default_factory=list)  # each [d_model, d_v]
    w_out: Optional[Tensor] = None                       # [num_heads*d_v, d_out]

    @classmethod
    def create(cls, num_heads: int, d_model: int, d_q: int, d_k: int, d_v: int,
               d_out: int, rng: RngStream) -> "MultiHeadAttention":
        if num_heads < 1:
            raise ValueError("need at least one attention head")
        if d_q != d_k:
            raise ValueError(f"query dim {d_q} must equal key dim {d_k}")
        layer = cls(num_heads=num_heads, d_q=d_q, d_k=d_k, d_v=d_v)
        for _ in range(num_heads):
            layer.w_query.append(Tensor(
                glorot_uniform(rng, d_model, d_q, (d_model, d_q)), requires_grad=True))
            layer.w_key.append(Tensor(
                glorot_uniform(rng, d_model, d_k, (d_model, d_k)), requires_grad=True))
            layer.w_value.append(Tensor(
                glorot_uniform(rng, d_model, d_v, (d_model, d_v)), requires_grad=True))
        layer.w_out = Tensor(
            glorot_uniform(rng, num_heads * d_v, d_out, (num_heads * d_v, d_out)),
            requires_grad=True)
        return layer

    def parameters(self) -> List[Tensor]:
        return [*self.w_query, *self.w_key, *self.w_value, self.w_out]


def multi_head_attention(layer: MultiHeadAttention, x: Tensor,
                         mask: Optional[np.ndarray] = None) -> Tensor:
    """Run every head's self-attention over ``x`` and project the concat."""
    heads = []
    for i in range(layer.num_heads):
        q = matmul(x, layer.w_query[i])
        k = matmul(x, layer.w_key[i])
        v = matmul(x, layer.w_value[i])
        heads.append(scaled_dot_attention(q, k, v, mask))
    return matmul(concat(heads, axis=-1), layer.w_out)
