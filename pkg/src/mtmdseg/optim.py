"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState) -> None:
    """One in-place Adam update. ``None`` grads count as zero."""
    if len(params) != len(grads):
        raise ShapeError("adam_step", "param count", len(params), len(grads))
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    elif len(state.first_moment) != len(params):
        raise ShapeError("adam_step", "state size", len(state.first_moment), len(params))
    for p, g, m in zip(params, grads, state.first_moment):
        if g is not None and g.shape != p.shape:
            raise ShapeError("adam_step", "grad", p.shape, g.shape)
        if m.shape != p.shape:
            raise ShapeError("adam_step", "moment", p.shape, m.shape)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps_opt)
        p.data -= step.astype(p.data.dtype, copy=False)


class Adam:
    """Thin stateful wrapper that reads ``.grad`` off each parameter."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(learning_rate=lr, beta1=betas[0], beta2=betas[1], eps_opt=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)
