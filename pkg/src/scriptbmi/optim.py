"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


CHUNK = 1 << 15


def _update(p, g, m, v, state: AdamState, lr_t: float, inv_bc2: float):
    tmp = np.multiply(g, 1.0 - state.beta1)
    m *= state.beta1
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - state.beta2
    v *= state.beta2
    v += tmp
    # p -= lr * (m / bc1) / (sqrt(v / bc2) + eps)
    np.sqrt(v, out=tmp)
    tmp *= inv_bc2
    tmp += state.eps
    np.divide(m, tmp, out=tmp)
    tmp *= lr_t
    p -= tmp


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """Apply one Adam update to ``params`` in place and return them."""
    if params.keys() != grads.keys():
        raise ShapeError(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {grads[name].shape} != parameter {p.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    lr_t = state.learning_rate / bc1
    inv_bc2 = 1.0 / np.sqrt(bc2)
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        flat = [a.reshape(-1) for a in (p, grads[name], state.m[name], state.v[name])]
        # chunked so every pass over a slice stays in cache
        for lo in range(0, p.size, CHUNK):
            _update(*(a[lo:lo + CHUNK] for a in flat), state, lr_t, inv_bc2)
    return params
