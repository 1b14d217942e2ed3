"""Epoch loop over a training split with the warmup/step-decay schedule."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .detector import DetectorModel, cascade_train_step
from .optim import SGD, LRSchedule
from .synth import DocumentSample


def format_log(record: dict) -> str:
    """``key=value`` pairs separated by spaces; floats carry 6 decimals."""
    return " ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in record.items())


def train(model: DetectorModel, samples: Sequence[DocumentSample], schedule: LRSchedule, epochs: int,
          seed: int = 0, momentum: float = 0.9, weight_decay: float = 1e-4, clip_norm: float | None = 10.0,
          log: Callable[[dict], None] | None = None) -> list[dict]:
    """One sample per iteration (batch size 1), samples visited in manifest order every epoch."""
    if not samples:
        raise ValueError("training needs at least one sample")
    opt = SGD(model.parameters(), lr=schedule.base_lr, momentum=momentum, weight_decay=weight_decay,
              clip_norm=clip_norm)
    rng = np.random.default_rng(seed)
    records = []
    it = 0
    for epoch in range(epochs):
        for sample in samples:
            lr = schedule(it, epoch)
            losses = cascade_train_step(model, sample, optimizer=opt, lr=lr, rng=rng)
            rec = {"iter": it + 1, "epoch": epoch + 1, "sample": sample.id, "lr": float(lr)}
            rec.update({k: float(v) for k, v in losses.items()})
            records.append(rec)
            if log is not None:
                log(rec)
            it += 1
    return records
