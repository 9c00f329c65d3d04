from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float | Sequence[float],
    weight_decay: float = 0.0,
) -> None:
    """Update ``params`` in place with bias-corrected Adam.

    The L2 penalty enters through the gradient (``g + weight_decay * p``).
    ``lr`` may be a single rate or one rate per parameter.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    rates = [lr] * len(params) if np.isscalar(lr) else list(lr)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} does not match param shape {p.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        v = state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        p.data = p.data - rates[i] * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Thin holder binding a parameter list to an :class:`AdamState`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, weight_decay: float = 0.0, **kw):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = AdamState(**kw)

    def step(self, grads: Sequence[np.ndarray], lr=None) -> None:
        adam_step(self.params, grads, self.state, self.lr if lr is None else lr, self.weight_decay)
