from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from add_curriculum.core.tensor import ContractError, Tensor


@dataclass
class OptState:
    """Adam/AdamW state. ``weight_decay`` of zero gives plain Adam."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def make_opt_state(params: Dict[str, Tensor], lr: float, **hyper) -> OptState:
    state = OptState(lr=lr, **hyper)
    for name, value in params.items():
        state.m[name] = np.zeros(value.shape, dtype=np.float32)
        state.v[name] = np.zeros(value.shape, dtype=np.float32)
    return state


def optimizer_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: OptState,
) -> Tuple[Dict[str, Tensor], OptState]:
    """One bias-corrected Adam step; AdamW decay ``p <- p(1 - lr*wd)`` comes first."""
    for name, grad in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise ContractError(f"gradient shape {grad.shape} does not match parameter {name!r}")
        if not np.all(np.isfinite(grad)):
            raise ContractError(f"non-finite gradient for parameter {name!r}")

    step = state.step + 1
    correction1 = 1.0 - state.beta1**step
    correction2 = 1.0 - state.beta2**step
    updated: Dict[str, Tensor] = {}
    m: Dict[str, np.ndarray] = {}
    v: Dict[str, np.ndarray] = {}
    for name, param in params.items():
        value = param.data.astype(np.float32)
        grad = grads.get(name)
        if grad is None:
            updated[name] = Tensor(value, name=name)
            m[name], v[name] = state.m[name], state.v[name]
            continue
        grad = grad.astype(np.float32)
        if state.weight_decay:
            value = value * np.float32(1.0 - state.lr * state.weight_decay)
        m[name] = (state.beta1 * state.m[name] + (1.0 - state.beta1) * grad).astype(np.float32)
        v[name] = (state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad).astype(np.float32)
        m_hat = m[name] / correction1
        v_hat = v[name] / correction2
        value = (value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)
        updated[name] = Tensor(value, name=name)

    new_state = OptState(
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        weight_decay=state.weight_decay,
        step=step,
        m=m,
        v=v,
    )
    return updated, new_state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-6)
    return {name: (g * scale).astype(g.dtype) for name, g in grads.items()}, total
