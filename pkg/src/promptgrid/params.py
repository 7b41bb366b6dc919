"""Shared bookkeeping for named trainable parameter sets."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from typing import Mapping

import numpy as np

from .engine import Tensor, ShapeError


class ParamContainer:
    """A named map of trainable tensors with checkpoint/fingerprint support."""

    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def names(self) -> list[str]:
        return sorted(self.params)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in self.names()]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data.copy() for k in self.names()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise KeyError(f"parameter names differ (missing={sorted(missing)}, "
                           f"unexpected={sorted(extra)})")
        for name in self.names():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != self.params[name].shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data = arr.copy()

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.arrays())

    def copy_into(self, other: "ParamContainer") -> None:
        other.load_arrays(self.arrays())


def fingerprint_arrays(arrays: Mapping[str, np.ndarray]) -> str:
    """Order-independent sha256 over names, shapes, and float64 bytes."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


@contextmanager
def frozen(*containers):
    """Temporarily clear requires_grad on the given parameter sets.

    Gradients still flow through the frozen ops when their inputs need
    them; only the parameter branches are pruned from the sweep.
    """
    tensors = [t for c in containers if c is not None for t in c.parameters()]
    saved = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in zip(tensors, saved):
            t.requires_grad = flag
