"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .nn import Parameter


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Iterable[Parameter], state: OptimizerState, lr: float) -> None:
    """One AdamW update of every non-frozen parameter, in place.

    Frozen parameters are skipped entirely and never receive moments.
    """
    live = [p for p in params if not p.frozen]
    names = [p.name for p in live]
    if "" in names or len(set(names)) != len(names):
        # moments are keyed by name, so names must be unique
        raise ValueError("parameters need unique non-empty names; call Module.assign_names()")
    for p in live:
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in live:
        g = p.grad.astype(np.float64)
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros(p.shape)
            state.v[p.name] = np.zeros(p.shape)
        v = state.v[p.name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[p.name], state.v[p.name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new = p.data.astype(np.float64) * (1.0 - lr * state.weight_decay) - lr * update
        p.data = new.astype(p.dtype)


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if not p.frozen and p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total
