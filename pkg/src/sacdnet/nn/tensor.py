"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy float64 array. Operations on tensors
record a computation graph; :func:`backward` walks it in reverse
topological order and accumulates d(loss)/d(param) into the ``grad``
buffer of every tensor created with ``requires_grad=True``. Adjoints of
intermediate nodes live only for the duration of a backward call, so
repeated backward passes accumulate correctly into the leaves.

The op surface is deliberately small: matmul, add, mul, concat, the
three activations used by the models, row softmax, dropout masking,
embedding lookup, masked mean pooling, reshape, sum/mean, and binary
cross-entropy. No general broadcasting: ``add`` accepts equal shapes or
a trailing-axis bias vector, ``matmul`` accepts stacked-by-weight and
stacked-by-stacked operands, which is all the models need.
"""

from __future__ import annotations

from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

GradFn = Callable[[np.ndarray], List[Tuple["Tensor", np.ndarray]]]

BCE_EPS = 1e-12

# SELU constants (standard self-normalizing values)
SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``requires_grad=True`` marks a trainable leaf: its ``grad`` buffer
    is allocated as zeros and receives accumulated adjoints on every
    :func:`backward` call until :meth:`zero_grad` resets it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_vjp", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = (
            np.zeros_like(self.data) if requires_grad else None
        )
        self._vjp: Optional[GradFn] = None
        self._parents: Tuple[Tensor, ...] = ()

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def in_graph(self) -> bool:
        """True if this tensor is a trainable leaf or a recorded result."""
        return self.requires_grad or self._vjp is not None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


def _make_node(data: np.ndarray, parents: Sequence[Tensor], vjp: GradFn) -> Tensor:
    """Wrap an op result, recording the graph edge iff a parent is live."""
    out = Tensor(data)
    if any(p.in_graph() for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g: np.ndarray):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        # a weight shared across a stacked batch sums its contributions
        while gb.ndim > b.data.ndim:
            gb = gb.sum(axis=0)
        while ga.ndim > a.data.ndim:
            ga = ga.sum(axis=0)
        return [(a, ga), (b, gb)]

    return _make_node(data, (a, b), vjp)


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy-style broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum where ``b`` broadcasts into ``a``'s shape (bias-style only)."""
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}") from exc
    if out_shape != a.shape:
        raise ValueError(f"add: second operand {b.shape} must broadcast into "
                         f"the first {a.shape}")
    data = a.data + b.data

    def vjp(g: np.ndarray):
        return [(a, g), (b, _reduce_to(g, b.shape))]

    return _make_node(data, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    data = a.data * b.data

    def vjp(g: np.ndarray):
        return [(a, g * b.data), (b, g * a.data)]

    return _make_node(data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def vjp(g: np.ndarray):
        return [(a, g * c)]

    return _make_node(data, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    widths = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(widths)[:-1]

    def vjp(g: np.ndarray):
        pieces = np.split(g, offsets, axis=axis)
        return list(zip(tensors, pieces))

    return _make_node(data, tuple(tensors), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def vjp(g: np.ndarray):
        return [(a, g.reshape(a.data.shape))]

    return _make_node(data, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def vjp(g: np.ndarray):
        return [(x, g * (x.data > 0.0))]

    return _make_node(data, (x,), vjp)


def selu(x: Tensor) -> Tensor:
    neg = SELU_ALPHA * np.expm1(x.data)
    data = SELU_LAMBDA * np.where(x.data > 0.0, x.data, neg)

    def vjp(g: np.ndarray):
        d = SELU_LAMBDA * np.where(x.data > 0.0, 1.0, SELU_ALPHA * np.exp(x.data))
        return [(x, g * d)]

    return _make_node(data, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    data = np.where(z >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))

    def vjp(g: np.ndarray):
        return [(x, g * data * (1.0 - data))]

    return _make_node(data, (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilized softmax along the last axis.

    Each trailing-axis slice of the output is a probability vector.
    Non-finite input raises, naming the offending row.
    """
    bad = ~np.isfinite(x.data)
    if bad.any():
        where = np.argwhere(bad)[0]
        row = tuple(int(i) for i in where[:-1])
        raise ValueError(f"softmax_rows: non-finite entry in row {row}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: np.ndarray):
        dot = (g * data).sum(axis=-1, keepdims=True)
        return [(x, data * (g - dot))]

    return _make_node(data, (x,), vjp)


# ---------------------------------------------------------------------------
# structured ops


def dropout_mask(x: Tensor, keep: np.ndarray, rate: float) -> Tensor:
    """Apply a precomputed 0/1 keep mask with inverted-dropout scaling."""
    if keep.shape != x.shape:
        raise ValueError(f"dropout mask shape {keep.shape} != input {x.shape}")
    scaled = keep.astype(np.float64) / (1.0 - rate)
    data = x.data * scaled

    def vjp(g: np.ndarray):
        return [(x, g * scaled)]

    return _make_node(data, (x,), vjp)


def embedding_lookup(table: Tensor, indices: np.ndarray,
                     pad_index: Optional[int] = None) -> Tensor:
    """Gather rows of ``table`` by integer index.

    Gradient scatters back into the gathered rows only; the ``pad_index``
    row, if given, is pinned (its gradient is forced to zero).
    """
    idx = np.asarray(indices)
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ValueError("embedding index out of range")
    data = table.data[idx]

    def vjp(g: np.ndarray):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        if pad_index is not None:
            gt[pad_index] = 0.0
        return [(table, gt)]

    return _make_node(data, (table,), vjp)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the second-to-last axis, restricted to mask-true rows."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape[:-1]:
        raise ValueError(f"mask shape {m.shape} != {x.shape[:-1]}")
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise ValueError("masked_mean: some sequence has no valid positions")
    weights = m.astype(np.float64) / counts[..., None]        # [..., L]
    data = (x.data * weights[..., None]).sum(axis=-2)         # [..., D]

    def vjp(g: np.ndarray):
        gx = weights[..., None] * np.expand_dims(g, -2)
        return [(x, gx)]

    return _make_node(data, (x,), vjp)


def tsum(x: Tensor) -> Tensor:
    data = np.asarray(x.data.sum())

    def vjp(g: np.ndarray):
        return [(x, np.broadcast_to(g, x.data.shape).copy())]

    return _make_node(data, (x,), vjp)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    data = np.asarray(x.data.mean())

    def vjp(g: np.ndarray):
        return [(x, np.broadcast_to(g / n, x.data.shape).copy())]

    return _make_node(data, (x,), vjp)


def bce_loss(p: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets."""
    targets = np.asarray(y, dtype=np.float64).reshape(-1)
    probs = p.data.reshape(-1)
    if probs.shape != targets.shape:
        raise ValueError(f"bce_loss length mismatch: {probs.shape[0]} probabilities "
                         f"vs {targets.shape[0]} targets")
    if not np.isin(targets, (0.0, 1.0)).all():
        raise ValueError("bce_loss targets must be 0 or 1")
    clamped = np.clip(probs, BCE_EPS, 1.0 - BCE_EPS)
    n = clamped.shape[0]
    data = np.asarray(
        -(targets * np.log(clamped) + (1.0 - targets) * np.log1p(-clamped)).mean()
    )

    def vjp(g: np.ndarray):
        gp = (clamped - targets) / (clamped * (1.0 - clamped)) / n
        gp = gp * (probs == clamped)  # clamped entries get no gradient
        return [(p, (g * gp).reshape(p.data.shape))]

    return _make_node(data, (p,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every trainable leaf's grad buffer.

    ``loss`` must be a scalar produced by recorded ops. Adjoints of
    intermediate nodes are kept in a per-call table, so calling backward
    twice on the same graph doubles the leaf gradients, nothing else.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if loss._vjp is None:
        raise ValueError("backward on a tensor with no recorded computation graph")

    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad += g
        if node._vjp is None:
            continue
        for parent, pg in node._vjp(g):
            if not parent.in_graph():
                continue
            acc = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if acc is None else acc + pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
