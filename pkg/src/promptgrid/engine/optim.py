"""Plain SGD with a cosine-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class CosineSchedule:
    """lr(step) = lr0 * 0.5 * (1 + cos(pi * step / total_steps)).

    Non-increasing, equals ``initial_lr`` at step 0 and 0 at
    ``total_steps``; steps past the end stay at 0.
    """

    initial_lr: float
    total_steps: int

    def __post_init__(self):
        if self.initial_lr < 0:
            raise ValueError("initial_lr must be non-negative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    def lr(self, step: int) -> float:
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        return self.initial_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


@dataclass
class OptimizerState:
    """Mutable SGD state: the schedule plus the step counter."""

    schedule: CosineSchedule
    step: int = 0

    @property
    def current_lr(self) -> float:
        return self.schedule.lr(self.step)


def sgd_step(params: Sequence[Tensor],
             grads: Sequence[np.ndarray] | Mapping[Tensor, np.ndarray],
             state: OptimizerState) -> None:
    """One update ``p <- p - lr(step) * g``; increments the step counter.

    Parameter arrays are rebound, not mutated, so values captured by
    existing graphs stay intact.
    """
    if isinstance(grads, Mapping):
        grads = [grads[p] for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    lr = state.current_lr
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} does not match param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient in sgd_step")
        p.data = p.data - lr * g
    state.step += 1
