"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a float64 ndarray plus the provenance needed for one
reverse sweep: the parent tensors of the op that produced it and one
vector-Jacobian closure per parent.  Every op output is checked for
NaN/Inf at construction; a non-finite value anywhere in a forward or
backward pass raises :class:`NonFiniteError` instead of propagating.

Gradient bookkeeping is identity-based: :func:`backward` walks the graph
once in topological order and returns a map from each trainable leaf to
its gradient array (same shape as the leaf's value).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in a forward value or a gradient."""


Vjp = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """A node in the computation graph.

    Parameters
    ----------
    data : array-like
        Values, converted to a float64 ndarray. Must be finite.
    requires_grad : bool
        Whether this tensor participates in gradient computation. Outputs
        of ops inherit ``True`` if any parent requires gradients.
    """

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, *, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _vjps: tuple[Vjp, ...] = ()):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(
                f"non-finite value in tensor{' ' + name if name else ''} "
                f"with shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._vjps = _vjps

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Detached copy of the values."""
        return self.data.copy()

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return powc(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    """Wrap ``x`` in a constant Tensor unless it already is one."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True, name=name)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjps: tuple[Vjp, ...]) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjps=vjps)
    return Tensor(data)


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squash = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape))
                   if s == 1 and g != 1)
    if squash:
        grad = grad.sum(axis=squash, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 (lambda g: _reduce_to(g, a.shape),
                  lambda g: _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b),
                 (lambda g: _reduce_to(g, a.shape),
                  lambda g: _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 (lambda g: _reduce_to(g * b.data, a.shape),
                  lambda g: _reduce_to(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b),
                 (lambda g: _reduce_to(g / b.data, a.shape),
                  lambda g: _reduce_to(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), (lambda g: -g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of non-positive value")
    return _node(np.log(a.data), (a,), (lambda g: g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), (lambda g: g * (1.0 - out * out),))


def powc(a, exponent: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    c = float(exponent)
    if c != int(c) and np.any(a.data < 0.0):
        raise NonFiniteError(f"fractional power {c} of negative value")
    out = a.data ** c
    return _node(out, (a,), (lambda g: g * c * a.data ** (c - 1.0),))


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """Elementwise GELU in the tanh approximation (single fused node)."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)

    return _node(out, (a,), (vjp,))


# -- linear algebra and structure ----------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_a(g):
        return _reduce_to(g @ np.swapaxes(b.data, -1, -2), a.shape)

    def grad_b(g):
        return _reduce_to(np.swapaxes(a.data, -1, -2) @ g, b.shape)

    return _node(out, (a, b), (grad_a, grad_b))


def linear(x, weight, bias) -> Tensor:
    """Fused ``x @ weight + bias`` (one node instead of two)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim < 2 or weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shapes: {x.shape} @ {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data

    def grad_x(g):
        return g @ weight.data.T

    def grad_w(g):
        return _reduce_to(np.swapaxes(x.data, -1, -2) @ g, weight.shape)

    def grad_b(g):
        return g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _node(out, (x, weight, bias), (grad_x, grad_w, grad_b))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    return _node(a.data.reshape(shape), (a,),
                 (lambda g: g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(int(x) for x in axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,),
                 (lambda g: g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]
        return vjp

    return _node(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


def gather_rows(a, indices) -> Tensor:
    """Select rows along axis -2: ``out[..., i, :] = a[..., indices[i], :]``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows expects a 1-D index array")
    if a.ndim < 2:
        raise ShapeError("gather_rows needs ndim >= 2 input")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-2]):
        raise ShapeError(f"row index out of range for shape {a.shape}")
    out = np.take(a.data, idx, axis=-2)

    def vjp(g):
        z = np.zeros_like(a.data)
        zm = np.moveaxis(z, -2, 0)
        np.add.at(zm, idx, np.moveaxis(g, -2, 0))
        return z

    return _node(out, (a,), (vjp,))


def take_label(a, indices) -> Tensor:
    """Per-row selection on the last axis: ``out[..., t] = a[..., t, indices[..., t]]``."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match rows of {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError(f"label index out of range for width {a.shape[-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
        return z

    return _node(out, (a,), (vjp,))


# -- reductions -----------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _node(out, (a,), (vjp,))


def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, a.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / count, a.shape).copy()

    return _node(out, (a,), (vjp,))


# -- reverse sweep --------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    """Post-order over the requires_grad subgraph; each node once."""
    order: list[Tensor] = []
    visited = {id(root)}
    stack: list[tuple[Tensor, Iterable[Tensor]]] = [
        (root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns a map from each trainable leaf reached by the sweep to its
    gradient. If ``leaves`` is given, the returned map covers exactly
    those tensors, with zeros for any that do not participate in the
    graph.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        order: list[Tensor] = []
    else:
        order = _topo_order(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    keep: dict[int, Tensor] = {id(loss): loss}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if not node._parents:
            result[node] = g
            continue
        for p, vjp in zip(node._parents, node._vjps):
            if not p.requires_grad:
                continue
            contrib = vjp(g)
            if not np.all(np.isfinite(contrib)):
                raise NonFiniteError(
                    f"non-finite gradient flowing into tensor of shape {p.shape}")
            if contrib.shape != p.shape:
                contrib = contrib.reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + contrib
            else:
                grads[id(p)] = contrib
                keep[id(p)] = p

    if leaves is not None:
        return {t: grads.get(id(t), np.zeros_like(t.data)) for t in leaves}
    if loss.requires_grad and not loss._parents:
        result[loss] = grads[id(loss)]
    return result


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradient arrays aligned with ``params`` (zeros where unreachable)."""
    table = backward(loss, leaves=params)
    return [table[p] for p in params]
