"""Adam optimizer and gradient utilities."""

from __future__ import annotations

import numpy as np


def adam_update(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Return the Adam-updated copy of ``param``; ``state`` (m, v, step) is updated in place."""
    m = state.get("m")
    v = state.get("v")
    if m is None:
        m = np.zeros_like(param)
        v = np.zeros_like(param)
    step = state.get("step", 0) + 1
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** step)
    vhat = v / (1 - beta2 ** step)
    state.update(m=m, v=v, step=step)
    return param - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = [dict() for _ in self.params]

    def step(self):
        b1, b2 = self.betas
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            p.data = adam_update(p.data, p.grad, st, self.lr, b1, b2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def grad_norm(params) -> float:
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global norm is at most ``max_norm``."""
    norm = grad_norm(params)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
