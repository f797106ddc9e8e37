"""Adam with bias correction, operating in place on parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, arr):
        return cls(np.zeros_like(arr, dtype=np.float32), np.zeros_like(arr, dtype=np.float32), 0)


def adam_step(param, grad, state: AdamState, lr=2e-4, beta1=0.5, beta2=0.999, epsilon=1e-8):
    """Apply one Adam update to ``param`` (an ndarray, modified in place).

    A ``None`` gradient counts as zero.  Returns ``(param, state)``.
    """
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    if grad is None:
        grad = np.zeros_like(param)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError(
            f"adam_step: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    state.t += 1
    g = grad.astype(np.float32, copy=False)
    state.m *= np.float32(beta1)
    state.m += np.float32(1.0 - beta1) * g
    state.v *= np.float32(beta2)
    state.v += np.float32(1.0 - beta2) * (g * g)
    m_hat = state.m / np.float32(1.0 - beta1**state.t)
    v_hat = state.v / np.float32(1.0 - beta2**state.t)
    param -= (np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(epsilon))).astype(np.float32)
    return param, state


@dataclass
class Adam:
    """Adam over a network's named parameters; state is keyed by parameter name."""

    named_params: list
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    state: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise UsageError("invalid Adam hyper-parameters")
        for name, p in self.named_params:
            self.state.setdefault(name, AdamState.zeros_like(p.data))

    def step(self):
        for name, p in self.named_params:
            adam_step(p.data, p.grad, self.state[name], self.lr, self.beta1, self.beta2, self.epsilon)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None
