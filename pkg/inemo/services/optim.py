"""Adaptive-moment updates with decoupled weight decay, shared by training and pose refinement."""
from dataclasses import dataclass

import numpy as np

from inemo.errors import TrainingDivergedError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=np.zeros(size), v=np.zeros(size), beta1=beta1, beta2=beta2, eps=eps)


def adam_update(params, grad, state, lr, weight_decay=0.0):
    """One bias-corrected step. Returns new params; `state` is advanced in place."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise TrainingDivergedError("Non-finite gradient in optimizer step")
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    out = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if weight_decay:
        out = out - lr * weight_decay * params
    return out
