"""Adam and AdamW parameter updates.

Both follow the bias-corrected moment scheme; AdamW applies weight decay
decoupled from the gradient (subtracted directly from the parameter), and Adam
is the weight_decay=0 special case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["OptimizerState", "adamw_step", "adam_step", "AdamW", "Adam"]


@dataclass
class OptimizerState:
    """Per-parameter first/second moments and a shared step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @staticmethod
    def for_param(param):
        data = param.data if hasattr(param, "data") else np.asarray(param)
        return OptimizerState(m=np.zeros_like(data), v=np.zeros_like(data))


def adamw_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.0):
    """One decoupled-weight-decay Adam update, in place on ``param``.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p, where the decay
    term uses the pre-update parameter value.
    """
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ValueError("adamw_step shape mismatch")
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1**state.step)
    v_hat = state.v / (1.0 - beta2**state.step)
    update = m_hat / (np.sqrt(v_hat) + eps)
    new = param - lr * update - lr * weight_decay * param
    return new.astype(param.dtype, copy=False), state


def adam_step(param, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """adamw_step with the decay term removed."""
    return adamw_step(param, grad, state, lr, beta1, beta2, eps, weight_decay=0.0)


@dataclass
class AdamW:
    """Stateful optimizer over a named-parameter registry.

    ``step`` consumes a name -> gradient map (from ``tensor.backward``) and
    updates each parameter tensor in place.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    states: dict = field(default_factory=dict)

    def step(self, params, grads):
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            st = self.states.get(name)
            if st is None:
                st = OptimizerState.for_param(p)
                self.states[name] = st
            p.data, _ = adamw_step(
                p.data, g, st, self.lr, self.beta1, self.beta2, self.eps,
                self.weight_decay,
            )

    def zero_grad(self, params):
        for p in params.values():
            p.zero_grad()


class Adam(AdamW):
    """AdamW with weight decay pinned to zero."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=0.0)
