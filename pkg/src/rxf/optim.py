"""Parameter containers, gradient collection, and the AdamW update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autograd import Tensor


@dataclass
class ParamSet:
    """Named trainable tensors plus AdamW moment state.

    `meta` carries whatever the owner needs to rebuild the forward pass from
    a checkpoint (encoder configs, stream dims, init seed).
    """

    params: dict[str, Tensor]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if not p.requires_grad:
                raise ValueError(f"parameter '{name}' does not require grad")
        for name in self.params:
            self.m.setdefault(name, np.zeros_like(self.params[name].data))
            self.v.setdefault(name, np.zeros_like(self.params[name].data))

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def collect_grads(loss: Tensor, pset: ParamSet) -> dict[str, np.ndarray]:
    """Run backward on a scalar loss and gather one gradient per parameter.

    A parameter that never entered the graph is an error (a loss that is
    merely constant in some parameter still yields its zero gradient).
    """
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for name, p in pset.params.items():
        if p.grad is None:
            raise ValueError(f"detached parameter '{name}': no gradient reached it")
        grads[name] = p.grad
    return grads


def adamw_step(
    pset: ParamSet,
    grads: dict[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> ParamSet:
    """One decoupled-weight-decay Adam update, in place.

    All gradients are validated before any parameter is touched, so a
    non-finite gradient aborts the step without a partial update.
    """
    for name in pset.params:
        if name not in grads:
            raise ValueError(f"missing gradient for parameter '{name}'")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        if grads[name].shape != pset.params[name].data.shape:
            raise ValueError(
                f"gradient shape {grads[name].shape} does not match parameter "
                f"'{name}' shape {pset.params[name].data.shape}"
            )
    pset.step += 1
    t = pset.step
    bias1 = 1.0 - beta1 ** t
    bias2 = 1.0 - beta2 ** t
    for name, p in pset.params.items():
        g = grads[name]
        pset.m[name] = beta1 * pset.m[name] + (1.0 - beta1) * g
        pset.v[name] = beta2 * pset.v[name] + (1.0 - beta2) * g * g
        m_hat = pset.m[name] / bias1
        v_hat = pset.v[name] / bias2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay != 0.0:
            p.data = p.data - lr * weight_decay * p.data
    return pset


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients down so their global norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {name: g * np.asarray(scale, dtype=g.dtype) for name, g in grads.items()}
