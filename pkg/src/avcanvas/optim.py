"""AdamW with decoupled weight decay and a linear learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, AdamState]:
    """One AdamW update; returns the new parameter array and state."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if param.shape != grad.shape or param.shape != state.m.shape or param.shape != state.v.shape:
        raise ShapeError(
            f"adamw shapes disagree: param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    t = state.step + 1
    g = grad.astype(np.float64)
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    p = param.astype(np.float64)
    p = p - lr * weight_decay * p
    p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p.astype(param.dtype), AdamState(m=m, v=v, step=t)


def linear_decay_lr(step: int, total_steps: int, start: float = 1e-4, end: float = 1e-5) -> float:
    """``start`` at step 0, ``end`` at step ``total_steps - 1``, linear between."""
    if total_steps <= 1:
        return start
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return start + (end - start) * frac


@dataclass
class AdamW:
    """Stateful optimiser over a list of parameter tensors (updated in place)."""

    params: list[Tensor]
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    states: list[AdamState] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not self.states:
            self.states = [
                AdamState(np.zeros(p.shape, np.float64), np.zeros(p.shape, np.float64)) for p in self.params
            ]

    def step(self, grads: dict[Tensor, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape, p.dtype)
            p.data, self.states[i] = adamw_step(p.data, g, self.states[i], lr, b1, b2, self.eps, self.weight_decay)
