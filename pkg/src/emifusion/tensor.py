"""Reverse-mode autodiff engine on float64 numpy arrays.

Every differentiable value is a :class:`Tensor` holding a numpy array, an
optional gradient buffer, and a closure that pushes gradients to its parents.
``backward()`` on a scalar runs the closures in reverse topological order.
Gradients accumulate across calls until cleared by the caller.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

# Additive fill for masked attention scores. Large enough that any realistic
# score (|x| well below 1e14) is swamped exactly: x + (-1e30) == -1e30 in
# float64, so masked positions are bit-inert to their inputs.
MASK_FILL = -1e30

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYER_NORM_EPS = 1e-5


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; message names both shapes."""


class DegenerateMaskError(ValueError):
    """A mask leaves no valid position where at least one is required."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where finite math was required."""


class Tensor:
    """A numpy-backed node in a dynamically built computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("Tensor data contains non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    # -- gradient plumbing --------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Gradients accumulate into ``.grad`` buffers without clearing what is
        already there, so repeated calls sum their contributions.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data: np.ndarray, parents) -> Tensor:
    """Build an op output without re-validating data (ops preserve finiteness
    themselves or are checked downstream)."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over axes that broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatchError(
            f"cannot add shapes {a.shape} and {b.shape}"
        ) from exc
    out = _result(data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = _result(-a.data, (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(-out.grad)
        out._backward = _bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatchError(
            f"cannot multiply shapes {a.shape} and {b.shape}"
        ) from exc
    out = _result(data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar without building a constant operand."""
    factor = float(factor)
    out = _result(a.data * factor, (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad * factor)
        out._backward = _bw
    return out


# -- matmul and shape ops ---------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes with numpy broadcasting in front.

    Both operands must have ndim >= 2; callers reshape vectors explicitly.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(
            f"matmul needs ndim >= 2 operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul inner dims differ: {a.shape} vs {b.shape}"
        )
    data = a.data @ b.data
    out = _result(data, (a, b))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if a.requires_grad:
                ga = g @ b.data.swapaxes(-1, -2)
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = a.data.swapaxes(-1, -2) @ g
                b._accumulate(_unbroadcast(gb, b.shape))
        out._backward = _bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    out = _result(data, (a,))
    if out.requires_grad:
        def _bw():
            a._accumulate(out.grad.reshape(a.shape))
        out._backward = _bw
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    out = _result(data, (a,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))
        def _bw():
            a._accumulate(out.grad.transpose(inverse))
        out._backward = _bw
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatchError(
            f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}"
        ) from exc
    out = _result(data, tensors)
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def _bw():
            pieces = np.split(out.grad, splits, axis=axis)
            for t, piece in zip(tensors, pieces):
                if t.requires_grad:
                    t._accumulate(piece)
        out._backward = _bw
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    out = _result(np.asarray(data), (a,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        out._backward = _bw
    return out


# -- nonlinearities and normalization ---------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact-erf GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = _result(x.data * phi_cdf, (x,))
    if out.requires_grad:
        def _bw():
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            x._accumulate(out.grad * (phi_cdf + x.data * pdf))
        out._backward = _bw
    return out


def masked_softmax(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis with optional boolean validity mask.

    The mask broadcasts against ``x``; False positions receive an additive
    ``MASK_FILL`` before the max-shifted exponential and are zeroed after,
    so they are exactly zero in the output and inert in the backward pass.
    A row with no valid position raises :class:`DegenerateMaskError`.
    """
    if mask is None:
        shifted = x.data
        keep = None
    else:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != x.shape:
            try:
                np.broadcast_shapes(keep.shape, x.shape)
            except ValueError as exc:
                raise ShapeMismatchError(
                    f"mask shape {keep.shape} does not broadcast to {x.shape}"
                ) from exc
        if not keep.any(axis=-1).all():
            raise DegenerateMaskError("softmax mask leaves an all-invalid row")
        shifted = x.data + np.where(keep, 0.0, MASK_FILL)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if keep is not None:
        e = np.where(keep, e, 0.0)
    data = e / e.sum(axis=-1, keepdims=True)
    out = _result(data, (x,))
    if out.requires_grad:
        def _bw():
            g = out.grad
            inner = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate(data * (g - inner))
        out._backward = _bw
    return out


def dropout(x: Tensor, p: float, train: bool, rng=None) -> Tensor:
    """Inverted dropout. Identity when ``train`` is False or ``p == 0``;
    neither case consumes the RNG."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode requires an rng")
    keep = (rng.random(x.shape) >= p).astype(np.float64) / (1.0 - p)
    out = _result(x.data * keep, (x,))
    if out.requires_grad:
        def _bw():
            x._accumulate(out.grad * keep)
        out._backward = _bw
    return out


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm params {gain.shape}/{shift.shape} do not match "
            f"feature dim {d}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = _result(normed * gain.data + shift.data, (x, gain, shift))
    if out.requires_grad:
        def _bw():
            g = out.grad
            lead = tuple(range(g.ndim - 1))
            if gain.requires_grad:
                gain._accumulate((g * normed).sum(axis=lead))
            if shift.requires_grad:
                shift._accumulate(g.sum(axis=lead))
            if x.requires_grad:
                gn = g * gain.data
                m1 = gn.mean(axis=-1, keepdims=True)
                m2 = (gn * normed).mean(axis=-1, keepdims=True)
                x._accumulate(inv * (gn - m1 - normed * m2))
        out._backward = _bw
    return out
