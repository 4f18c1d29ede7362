"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is built dynamically: every operation that touches a tensor
requiring gradients records its parents and a backward closure on the
output tensor.  Creation order doubles as a topological order, so
``backward`` walks tensors in reverse creation order and accumulates
gradients across fan-out.  Everything is 64-bit; the norm identities
checked downstream need the full mantissa.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "relu",
    "matmul",
    "conv2d",
    "softmax_xent",
    "backward",
    "im2col",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_node_counter = itertools.count()

_grad_enabled = True


@contextmanager
def no_grad():
    """Context manager that disables graph recording (eval-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """N-dimensional float64 value with an optional gradient slot.

    Parameters
    ----------
    data : array-like
        Values, converted to a float64 ndarray.
    requires_grad : bool
        Leaves with ``requires_grad=True`` receive a populated ``grad``
        after ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence[np.ndarray]]] = None
        self.node_id = next(_node_counter)

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: Iterable["Tensor"], backward_fn) -> "Tensor":
        parents = tuple(parents)
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        return out

    # -- operators -------------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._coerce(other)
        out_data = self.data + other.data
        a_shape, b_shape = self.shape, other.shape

        def bwd(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._make(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        out_data = self.data * other.data
        a, b = self, other

        def bwd(g):
            return (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            )

        return Tensor._make(out_data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out_data = self.data / other.data
        a, b = self, other

        def bwd(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._make(out_data, (a, b), bwd)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise TypeError("exponent must be a Python scalar")
        out_data = self.data ** exponent
        a = self

        def bwd(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return Tensor._make(out_data, (a,), bwd)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bwd(g):
            return (g * 0.5 / out_data,)

        return Tensor._make(out_data, (self,), bwd)

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor._make(np.log(self.data), (self,), lambda g: (g / a.data,))

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.shape

        def bwd(g):
            return (_spread(g, in_shape, axis, keepdims),)

        return Tensor._make(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else _axis_count(self.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape
        out_data = self.data.reshape(shape)

        def bwd(g):
            return (g.reshape(in_shape),)

        return Tensor._make(out_data, (self,), bwd)

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out_data = self.data.transpose(axes)

        def bwd(g):
            return (g.transpose(inverse),)

        return Tensor._make(out_data, (self,), bwd)

    def backward(self) -> None:
        backward(self)


Scalar = Union[int, float]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _axis_count(shape: tuple, axis) -> int:
    if isinstance(axis, int):
        axis = (axis,)
    return int(np.prod([shape[a] for a in axis]))


def _spread(grad: np.ndarray, in_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back over the summed axes."""
    if axis is None:
        return np.broadcast_to(grad, in_shape).copy() if np.ndim(grad) == 0 else np.full(in_shape, grad)
    if not keepdims:
        if isinstance(axis, int):
            axis = (axis,)
        expand = [slice(None)] * len(in_shape)
        for a in sorted(a % len(in_shape) for a in axis):
            expand[a] = np.newaxis
        grad = np.asarray(grad)[tuple(expand)]
    return np.broadcast_to(grad, in_shape).copy()


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is taken to be 0."""
    mask = x.data > 0.0
    out_data = np.where(mask, x.data, 0.0)
    return Tensor._make(out_data, (x,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of 2-D tensors with the standard transpose backward."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._make(out_data, (a, b), bwd)


def im2col(x: np.ndarray, kernel: int, stride: int, padding: int):
    """Extract sliding windows as rows.

    Returns ``(cols, h_out, w_out)`` where ``cols`` has shape
    ``(B*h_out*w_out, kernel*kernel*C)`` and each row flattens a window in
    (row, col, channel) order, matching a ``(K, K, C_in, C_out)`` kernel
    reshaped to ``(K*K*C_in, C_out)``.
    """
    b, c, h, w = x.shape
    if padding:
        xp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    hp, wp = xp.shape[2], xp.shape[3]
    if kernel > hp or kernel > wp:
        raise ShapeError(
            f"kernel {kernel} exceeds padded input {hp}x{wp}"
        )
    h_out = (hp - kernel) // stride + 1
    w_out = (wp - kernel) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"non-positive conv output extent {h_out}x{w_out} for input {h}x{w}, "
            f"kernel {kernel}, stride {stride}, padding {padding}"
        )
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 4, 5, 1).reshape(b * h_out * w_out, kernel * kernel * c)
    return np.ascontiguousarray(cols), h_out, w_out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a ``B x C_in x H x W`` input with a
    ``K x K x C_in x C_out`` kernel, implemented as im2col + matmul."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D, got {x.shape}")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d kernel must be KxKxC_inxC_out, got {kernel.shape}")
    if kernel.shape[2] != x.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    b, c_in, h, w = x.shape
    k, _, _, c_out = kernel.shape
    cols, h_out, w_out = im2col(x.data, k, stride, padding)
    kflat = kernel.data.reshape(k * k * c_in, c_out)
    out_flat = cols @ kflat
    out_data = out_flat.reshape(b, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    def bwd(g):
        g_flat = g.transpose(0, 2, 3, 1).reshape(b * h_out * w_out, c_out)
        d_kernel = (cols.T @ g_flat).reshape(kernel.shape)
        d_cols = g_flat @ kflat.T
        d_windows = d_cols.reshape(b, h_out, w_out, k, k, c_in).transpose(0, 5, 1, 2, 3, 4)
        hp, wp = h + 2 * padding, w + 2 * padding
        d_xp = np.zeros((b, c_in, hp, wp))
        # scatter-add each kernel offset back onto the padded input
        for i in range(k):
            for j in range(k):
                d_xp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += d_windows[
                    :, :, :, :, i, j
                ]
        if padding:
            d_xp = d_xp[:, :, padding : padding + h, padding : padding + w]
        return d_xp, d_kernel

    return Tensor._make(out_data, (x, kernel), bwd)


def softmax_xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Stabilized by max-subtraction; backward is (softmax - onehot) / B.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_xent expects BxK logits, got {logits.shape}")
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels out of range [0, {k}): {labels.min()}..{labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    softmax = expz / expz.sum(axis=1, keepdims=True)
    logprob = z - np.log(expz.sum(axis=1, keepdims=True))
    loss = -logprob[np.arange(b), labels].mean()

    def bwd(g):
        d = softmax.copy()
        d[np.arange(b), labels] -= 1.0
        return (g * d / b,)

    return Tensor._make(np.asarray(loss), (logits,), bwd)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Traverses the recorded graph once in reverse creation order,
    accumulating (+=) across fan-out.
    """
    if loss.ndim != 0:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes or not t.requires_grad:
            continue
        nodes[t.node_id] = t
        stack.extend(t._parents)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    for node_id in sorted(nodes, reverse=True):
        t = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if t._backward_fn is None:
            # leaf: expose the accumulated gradient
            t.grad = g if t.grad is None else t.grad + g
            continue
        parent_grads = t._backward_fn(g)
        for parent, pg in zip(t._parents, parent_grads):
            if not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = np.asarray(pg, dtype=np.float64)
