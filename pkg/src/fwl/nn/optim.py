"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .model import TrainConfig


def adamw_update(theta, grad, m, v, t: int, cfg: TrainConfig):
    """One step on a single array; returns ``(theta, m, v)`` as new arrays."""
    if t < 1:
        raise ValueError("step index t starts at 1")
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
    m_hat = m / (1.0 - cfg.beta1 ** t)
    v_hat = v / (1.0 - cfg.beta2 ** t)
    theta = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps) - cfg.lr * cfg.weight_decay * theta
    return theta, m, v


class AdamW:
    """Optimizer state over a named parameter dict; updates in name order."""

    def __init__(self, params: dict, cfg: TrainConfig, names=None):
        self.cfg = cfg
        self.names = list(names if names is not None else params)
        self.m = {k: np.zeros_like(params[k].data) for k in self.names}
        self.v = {k: np.zeros_like(params[k].data) for k in self.names}
        self.t = 0

    def step(self, params: dict) -> None:
        for k in self.names:
            g = params[k].grad
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter '{k}'")
        self.t += 1
        for k in self.names:
            p = params[k]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[k], self.v[k] = adamw_update(p.data, g, self.m[k], self.v[k], self.t, self.cfg)


def adamw_step(params: dict, grads: dict, cfg: TrainConfig, t: int, state: dict | None = None):
    """Functional form: ``params``/``grads`` map names to arrays.

    Returns ``(new_params, state)``; pass ``state`` back for the next step.
    """
    state = state if state is not None else {"m": {}, "v": {}}
    out = {}
    for k, theta in params.items():
        g = np.asarray(grads.get(k, np.zeros_like(theta)), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter '{k}'")
        m = state["m"].get(k, np.zeros_like(theta))
        v = state["v"].get(k, np.zeros_like(theta))
        out[k], state["m"][k], state["v"][k] = adamw_update(np.asarray(theta, dtype=np.float64), g, m, v, t, cfg)
    return out, state
