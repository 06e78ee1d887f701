"""Adam optimizer with bias correction."""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from .tensor import Tensor


class AdamState:
    """First/second moment buffers plus the step counter."""

    def __init__(self, params: Sequence[Tensor]):
        self.m: List[np.ndarray] = [np.zeros_like(p.data) for p in params]
        self.v: List[np.ndarray] = [np.zeros_like(p.data) for p in params]
        self.t: int = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray],
              state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update. Deterministic given its inputs."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads, and state must have equal lengths")
    state.t += 1
    t = state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Convenience wrapper reading gradients from the tensors' buffers."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState(self.params)

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise ValueError("parameter has no gradient buffer")
            grads.append(p.grad)
        adam_step(self.params, grads, self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
