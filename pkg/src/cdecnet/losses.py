"""Classification and box-regression losses for the detector branches."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autograd import ShapeError, Tensor, make_result


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-wise softmax."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got shape {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {labels.shape[0]} labels")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if n == 0:
        return make_result(np.array(0.0), (logits,), "xent", lambda g: None)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def _bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        logits.accumulate(d * (g / n))

    return make_result(np.array(loss), (logits,), "xent", _bw)


def sigmoid_binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``targets`` (0/1) against sigmoid(logits)."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {targets.shape}")
    n = max(logits.size, 1)
    x = logits.data
    # log(1 + exp(-|x|)) form keeps large logits finite
    loss = (np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))).sum() / n

    def _bw(g):
        p = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        logits.accumulate((p - targets) * (g / n))

    return make_result(np.array(loss), (logits,), "bce", _bw)


def smooth_l1(pred: Tensor, target: Tensor | np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: 0.5 d^2/beta inside |d| < beta, |d| - 0.5 beta outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    tdata = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != tdata.shape:
        raise ShapeError(f"pred {pred.shape} vs target {tdata.shape}")
    n = max(pred.size, 1)
    d = pred.data - tdata
    ad = np.abs(d)
    small = ad < beta
    loss = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta).sum() / n
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def _bw(g):
        dd = np.where(small, d / beta, np.sign(d)) * (g / n)
        pred.accumulate(dd)
        if isinstance(target, Tensor) and target.requires_grad:
            target.accumulate(-dd)

    return make_result(np.array(loss), parents, "smooth_l1", _bw)
