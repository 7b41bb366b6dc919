"""Differentiable building blocks composed from the tensor primitives."""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    as_tensor,
    exp,
    gelu,  # noqa: F401  (re-exported; the fused primitive lives in tensor)
    log,
    mul,
    powc,
    sub,
    sum_,
    take_label,
)


def softmax(x, axis: int = -1) -> Tensor:
    """Stabilized softmax along ``axis``; outputs lie on the simplex."""
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    # Subtracting the (constant) max leaves the function, and hence its
    # gradient, unchanged.
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = exp(sub(x, shift))
    return e / sum_(e, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    shift = np.max(x.data, axis=axis, keepdims=True)
    z = sub(x, shift)
    return z - log(sum_(exp(z), axis=axis, keepdims=True))


def cross_entropy(logits, targets) -> Tensor:
    """Mean over positions of -log softmax(logits)[target].

    ``logits`` has shape (..., T, V); ``targets`` holds integer indices of
    shape (..., T) with every index < V.
    """
    logits = as_tensor(logits)
    if logits.ndim < 2:
        raise ShapeError(f"cross_entropy needs (..., T, V) logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.intp)
    if idx.shape != logits.shape[:-1]:
        raise ShapeError(
            f"target shape {idx.shape} does not match logit rows {logits.shape[:-1]}")
    if idx.size == 0:
        raise ShapeError("cross_entropy over zero positions")
    if idx.min() < 0 or idx.max() >= logits.shape[-1]:
        raise ShapeError(
            f"target index out of range for vocabulary {logits.shape[-1]}")
    picked = take_label(log_softmax(logits, axis=-1), idx)
    return -picked.mean()


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = mul(centered, centered).mean(axis=-1, keepdims=True)
    inv = powc(var + eps, -0.5)
    return mul(centered, inv) * gain + bias


def cosine_similarity(u, v) -> Tensor:
    """Cosine of the angle between two 1-D vectors; errors on zero norm."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cosine_similarity needs matching 1-D vectors, "
                         f"got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine_similarity of a zero-norm vector")
    dot = sum_(mul(u, v))
    return dot * powc(sum_(mul(u, u)), -0.5) * powc(sum_(mul(v, v)), -0.5)


def squared_distance(u, v) -> Tensor:
    """Sum of squared elementwise differences."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"squared_distance shapes differ: {u.shape} vs {v.shape}")
    d = sub(u, v)
    return sum_(mul(d, d))
