"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "Adam"]


@dataclass
class AdamState:
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float,
              betas: Tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
    """One Adam update; returns ``(new_params, state)``.

    ``state`` is updated in place. Arrays in ``params`` are not modified.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: grad shape {g.shape} != {p.shape}")
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        out.append((p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype))
    return out, state


class Adam:
    """Stateful wrapper over :func:`adam_step` for a list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.state = AdamState()

    def step(self, grads: Sequence[np.ndarray]) -> None:
        new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr, self.betas, self.eps)
        for p, d in zip(self.params, new):
            p.data = d

    def scalars(self) -> dict:
        return {"lr": self.lr, "beta1": self.betas[0], "beta2": self.betas[1], "eps": self.eps,
                "step": self.state.step}
