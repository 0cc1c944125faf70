"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
) -> dict[str, np.ndarray]:
    """One AdamW update; returns new arrays and advances ``state``.

    A missing gradient counts as zero. Any non-finite gradient rejects the
    whole step before anything is modified.
    """
    if state.lr < 0 or state.weight_decay < 0 or state.eps <= 0:
        raise ContractViolation("AdamW hyperparameters must be non-negative")
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ContractViolation(f"grad {name}: shape {g.shape} vs param {params[name].shape}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {name}; step rejected")

    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        decayed = p * (1.0 - state.lr * state.weight_decay)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (decayed - update).astype(p.dtype, copy=False)
    state.step = t
    return out


class AdamW:
    """Stateful wrapper that rebinds the ``data`` of parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        new = adamw_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
        )
        for k, p in self.params.items():
            p.data = new[k]
