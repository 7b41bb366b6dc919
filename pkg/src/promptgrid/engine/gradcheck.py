"""Finite-difference gradient verification.

The numeric side only ever calls the forward function, so it is
independent of the reverse-mode implementation it is used to check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_gradient(fn: Callable[[], Tensor], param: Tensor,
                     index: tuple[int, ...], h: float = 1e-4) -> float:
    """Central difference of ``fn()`` w.r.t. one element of ``param``."""
    base = param.data
    bumped = base.copy()
    bumped[index] = base[index] + h
    param.data = bumped
    hi = fn().item()
    bumped = base.copy()
    bumped[index] = base[index] - h
    param.data = bumped
    lo = fn().item()
    param.data = base
    return (hi - lo) / (2.0 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor],
                    rng: np.random.Generator, samples_per_param: int = 4,
                    h: float = 1e-4) -> float:
    """Compare analytic gradients of ``fn()`` against central differences.

    Samples ``samples_per_param`` random elements from each parameter and
    returns the worst relative error observed.
    """
    grads = backward(fn(), leaves=params)
    worst = 0.0
    for p in params:
        flat_size = p.size
        count = min(samples_per_param, flat_size)
        picks = rng.choice(flat_size, size=count, replace=False)
        for flat in picks:
            index = np.unravel_index(int(flat), p.shape)
            num = numeric_gradient(fn, p, index, h=h)
            ana = float(grads[p][index])
            worst = max(worst, relative_error(ana, num))
    return worst
