"""Adaptive-moment gradient optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw) -> "OptimizerState":
        shapes = [np.shape(_data(p)) for p in params]
        return cls(m=[np.zeros(s) for s in shapes], v=[np.zeros(s) for s in shapes], **kw)


def _data(p):
    return p.data if hasattr(p, "data") else np.asarray(p)


def optimizer_step(state: OptimizerState, params, grads):
    """One update. Returns (new parameter arrays, new state); inputs are untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state are misaligned")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=float)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        new_p.append(_data(p) - state.lr * mhat / (np.sqrt(vhat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(state.lr, b1, b2, state.eps, t, new_m, new_v)
    return new_p, new_state


class Adam:
    """In-place convenience wrapper around :func:`optimizer_step` for tensors."""

    def __init__(self, params, lr: float = 1e-2, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState.for_params(self.params, lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads) -> None:
        new, self.state = optimizer_step(self.state, self.params, grads)
        for p, a in zip(self.params, new):
            p.data = a
