"""Nadam with a constant first-moment decay (Dozat's formulation)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .autodiff import Tensor

MAX_STEPS = 2**32 - 1  # the checkpoint stores the step counter as u32


@dataclass
class NadamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Tensor], **hyper) -> "NadamState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros(p.shape, dtype=np.float64)
            state.v[name] = np.zeros(p.shape, dtype=np.float64)
        return state


def nadam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: NadamState):
    """Apply one update in place and return ``(params, state)``.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    theta <- theta - lr * (b1 m/(1-b1^t) + (1-b1) g/(1-b1^t)) / (sqrt(v/(1-b2^t)) + eps)
    """
    if state.t >= MAX_STEPS:
        raise OverflowError(f"Nadam step counter would exceed {MAX_STEPS}")
    if set(params) != set(grads):
        raise ValueError("params and grads must have the same names")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {params[name].shape}")
        if name not in state.m:
            state.m[name] = np.zeros(g.shape, dtype=np.float64)
            state.v[name] = np.zeros(g.shape, dtype=np.float64)
        elif state.m[name].shape != g.shape:
            raise ValueError(f"optimizer state shape mismatch for {name!r}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.t
    bias2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / bias1
        v_hat = v / bias2
        update = state.lr * (b1 * m_hat + (1.0 - b1) * g / bias1) / (np.sqrt(v_hat) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
    return params, state
