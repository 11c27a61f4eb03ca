"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["AdamState", "adam_step", "Adam"]


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Return updated copies of ``params``; ``state`` is advanced in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return out


class Adam:
    """Updates :class:`~geoclo.nn.tensor.Tensor` parameters in place."""

    def __init__(self, params: dict, learning_rate: float = 1e-3, **kw):
        self.params = params
        self.state = AdamState(learning_rate=learning_rate, **kw)

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        if grads is None:
            grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad)
                     for k, p in self.params.items()}
        new = adam_step(self.state, {k: p.data for k, p in self.params.items()}, grads)
        for k, p in self.params.items():
            p.data = new[k]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
