"""Spread loss and its epoch-indexed margin schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class MarginSchedule:
    initial: float = 0.2
    step: float = 0.1
    period: int = 2
    cap: float = 0.9

    def __call__(self, epoch: int) -> float:
        return margin_at(epoch, self)


def margin_at(epoch: int, schedule: MarginSchedule = MarginSchedule()) -> float:
    """Margin grows by ``step`` every ``period`` epochs up to ``cap``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    m = schedule.initial + schedule.step * math.floor(epoch / schedule.period)
    # rounding keeps the printed schedule free of binary-float tails (0.30000000000000004)
    return round(min(m, schedule.cap), 12)


def spread_loss(activations: Tensor, targets, margin: float) -> Tensor:
    """Batch mean of sum_{j != t} max(0, m - (a_t - a_j))^2.

    ``activations`` is ``[N, classes]`` (a single ``[classes]`` row is also
    accepted); ``targets`` holds one class index per row.
    """
    if activations.ndim == 1:
        activations = activations.reshape(1, -1)
    n, k = activations.shape
    t = np.atleast_1d(np.asarray(targets, dtype=int))
    if t.shape != (n,):
        raise ValueError(f"expected {n} targets, got {t.shape}")
    if np.any(t < 0) or np.any(t >= k):
        raise IndexError(f"target out of range for {k} classes: {t.tolist()}")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), t] = 1.0
    a_t = (activations * onehot).sum(axis=1, keepdims=True)
    gap = T.relu(float(margin) - (a_t - activations))
    per_sample = (T.square(gap) * (1.0 - onehot)).sum(axis=1)
    return per_sample.mean()
