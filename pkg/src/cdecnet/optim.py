"""SGD with momentum plus the warmup / step-decay learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor


class MissingGradError(RuntimeError):
    pass


class SGD:
    """p <- p - lr * v,  v <- momentum * v + grad.  Grads are zeroed after each step."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0, clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None, allow_missing: bool = True) -> None:
        lr = self.lr if lr is None else lr
        grads = []
        for p in self.params:
            if p.grad is None:
                if not allow_missing:
                    raise MissingGradError(f"parameter {p.name or p.shape} has no gradient")
                grads.append(None)
            else:
                grads.append(p.grad)
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g * g).sum()) for g in grads if g is not None))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = [None if g is None else g * scale for g in grads]
        for p, v, g in zip(self.params, self.velocity, grads):
            if g is None:
                continue
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             state: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Functional single step; returns the velocity buffers to thread into the next call.

    Every parameter must carry a gradient.
    """
    if state is None:
        state = [np.zeros_like(p.data) for p in params]
    for p, v in zip(params, state):
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name or p.shape} has no gradient")
        v *= momentum
        v += p.grad
        p.data -= lr * v
        p.grad = None
    return state


@dataclass
class LRSchedule:
    """Linear warmup from ``warmup_ratio * base_lr`` then x0.1 at each decay epoch."""

    base_lr: float
    warmup_iters: int = 500
    warmup_ratio: float = 0.0033
    decay_epochs: tuple[int, ...] = (25, 40)
    gamma: float = 0.1

    def __call__(self, iteration: int, epoch: int) -> float:
        lr = self.base_lr * self.gamma ** sum(epoch >= e for e in self.decay_epochs)
        if self.warmup_iters > 0 and iteration < self.warmup_iters:
            frac = iteration / self.warmup_iters
            lr *= self.warmup_ratio + (1.0 - self.warmup_ratio) * frac
        return lr
