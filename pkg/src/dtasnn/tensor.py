"""Dense tensors with taped reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array. While a
:class:`ComputationRecord` is active (``with ComputationRecord():``), every
primitive appends one node to the record; :func:`backward` replays the nodes
in exact reverse creation order and accumulates gradients additively into
every reachable tensor that requires them. Tensors never adopted by a record
are constants and never receive gradients.

Default element type is float32. Kernels are dtype-generic, so verification
code may run the same graph in float64 by constructing float64 tensors.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf, expit as _expit

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GeometryError(ShapeError):
    """A convolution was asked to produce an empty output extent."""


class RecordError(RuntimeError):
    """Misuse of a computation record (reuse, cross-record mixing, ...)."""


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Trailing-aligned broadcast shape of *a* and *b*.

    Two extents are compatible iff equal or one of them is 1.
    """
    out = []
    for x, y in zip(reversed((1,) * max(0, len(b) - len(a)) + a),
                    reversed((1,) * max(0, len(a) - len(b)) + b)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"shapes {a} and {b} are not broadcast-compatible")
        out.append(max(x, y))
    return tuple(reversed(out))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum *grad* over the axes that broadcasting expanded, back to *shape*."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional float array with an optional gradient buffer.

    ``requires_grad`` marks optimizable leaves; intermediate tensors are
    tracked automatically through the active record. Values are contiguous
    and treated as immutable while a record referencing them is alive (the
    optimizer mutates parameter values only between records).
    """

    __slots__ = ("values", "grad", "rec", "requires_grad")

    def __init__(self, values, requires_grad: bool = False,
                 dtype: np.dtype | None = None):
        if dtype is not None:
            target = dtype
        elif (isinstance(values, (np.ndarray, np.generic))
              and values.dtype in (np.float32, np.float64)):
            target = values.dtype
        else:
            target = DEFAULT_DTYPE
        arr = np.asarray(values, dtype=target)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy(order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        self.values = arr
        self.grad: np.ndarray | None = None
        self.rec: ComputationRecord | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(())[()])

    def detach(self) -> "Tensor":
        """Constant view of the same values, severed from any record."""
        return Tensor(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flags})"

    # arithmetic sugar; the free functions hold the actual rules
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, perm):
        return transpose(self, perm)


class _Node:
    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs, out, backward_fn):
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


_ACTIVE: "ComputationRecord | None" = None


class ComputationRecord:
    """Append-only tape of executed primitives.

    Creation order is topological order; :func:`backward` traverses it in
    exact reverse. A record is single-use: a second backward raises
    :class:`RecordError`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: list[Tensor] = []
        self._backward_done = False

    def __enter__(self) -> "ComputationRecord":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RecordError("a computation record is already active")
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _ACTIVE
        _ACTIVE = None
        self._release_leaves()

    def _adopt_leaf(self, t: Tensor) -> None:
        t.rec = self
        self._leaves.append(t)

    def _release_leaves(self) -> None:
        for t in self._leaves:
            t.rec = None
        self._leaves.clear()


def apply_primitive(inputs: tuple, out_values: np.ndarray,
                    backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Create the output tensor of a primitive, recording it if traced.

    ``backward_fn`` maps the upstream gradient to one partial per input
    (``None`` for inputs with no gradient path).
    """
    out = Tensor(out_values)
    rec = _ACTIVE
    if rec is None:
        return out
    traced = False
    for t in inputs:
        if t.rec is not None and t.rec is not rec:
            raise RecordError("input tensor belongs to a different computation record")
        traced = traced or t.rec is rec or t.requires_grad
    if traced:
        for t in inputs:
            if t.requires_grad and t.rec is None:
                rec._adopt_leaf(t)
        out.rec = rec
        rec.nodes.append(_Node(inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every tensor reachable from the scalar *loss*.

    Accumulation is additive: a tensor consumed k times receives the sum of
    its k partials. Raises on a non-scalar loss, a loss detached from any
    record, or a record whose backward already ran.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    rec = loss.rec
    if rec is None:
        raise RecordError("loss is not attached to a computation record")
    if rec._backward_done:
        raise RecordError("backward was already called on this record")
    rec._backward_done = True
    loss.grad = np.ones_like(loss.values)
    for node in reversed(rec.nodes):
        g = node.out.grad
        if g is None:
            continue
        partials = node.backward_fn(g)
        for t, p in zip(node.inputs, partials):
            if p is None:
                continue
            if t.rec is rec or t.requires_grad:
                t.grad = p if t.grad is None else t.grad + p
    rec._release_leaves()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap *x* as a constant tensor, matching the dtype of *like*."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


# ---------------------------------------------------------------------------
# element-wise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    broadcast_shape(a.shape, b.shape)
    out = a.values + b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_primitive((a, b), out, bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    broadcast_shape(a.shape, b.shape)
    out = a.values - b.values

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_primitive((a, b), out, bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    broadcast_shape(a.shape, b.shape)
    av, bv = a.values, b.values
    out = av * bv

    def bwd(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return apply_primitive((a, b), out, bwd)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.values)

    def bwd(g):
        return (g * out,)

    return apply_primitive((a,), out, bwd)


def tlog(a: Tensor) -> Tensor:
    av = a.values
    out = np.log(av)

    def bwd(g):
        return (g / av,)

    return apply_primitive((a,), out, bwd)


# ---------------------------------------------------------------------------
# activations


def sigmoid(a: Tensor) -> Tensor:
    out = _expit(a.values).astype(a.dtype, copy=False)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return apply_primitive((a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    av = a.values
    out = np.maximum(av, 0)

    def bwd(g):
        return (g * (av > 0),)

    return apply_primitive((a,), out, bwd)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian-error linear unit, exact CDF form: x * Phi(x)."""
    av = a.values
    cdf = 0.5 * (1.0 + _erf(av * _INV_SQRT2))
    out = (av * cdf).astype(a.dtype, copy=False)

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * av * av)
        return (g * (cdf + av * pdf),)

    return apply_primitive((a,), out, bwd)


def heaviside(a: Tensor) -> Tensor:
    """Step function, 1 where a >= 0. Produces a constant: no backward rule.

    Differentiable spiking lives in the neuron layer, which pairs this
    forward with a surrogate-gradient backward.
    """
    return Tensor((a.values >= 0).astype(a.dtype))


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(axes, ndim) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = tuple(ax if ax >= 0 else ax + ndim for ax in axes)
    for ax in out:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank-{ndim} tensor")
    return out


def mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out = a.values.mean(axis=axes, keepdims=keepdims)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    in_shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, in_shape).astype(g.dtype, copy=False).copy(),)

    return apply_primitive((a,), out, bwd)


def tsum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out = a.values.sum(axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, in_shape).astype(g.dtype, copy=False).copy(),)

    return apply_primitive((a,), out, bwd)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes, keeping them as size 1."""
    return mean(a, axes=(-2, -1), keepdims=True)


# ---------------------------------------------------------------------------
# layout


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} ({a.size} elements) to {shape}")
    out = a.values.reshape(shape)
    in_shape = a.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return apply_primitive((a,), out, bwd)


def transpose(a: Tensor, perm) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {perm} for rank-{a.ndim} tensor")
    out = np.ascontiguousarray(np.transpose(a.values, perm))
    inv = tuple(np.argsort(perm))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return apply_primitive((a,), out, bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeError(f"stack of mismatched shapes {first} and {t.shape}")
    out = np.stack([t.values for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.ascontiguousarray(s) for s in np.moveaxis(g, axis, 0))

    return apply_primitive(tensors, out, bwd)


def index(a: Tensor, i: int, axis: int = 0) -> Tensor:
    """Select one slice along *axis*; backward scatters into zeros."""
    if not 0 <= i < a.shape[axis]:
        raise ShapeError(f"index {i} out of range for axis {axis} of {a.shape}")
    out = np.ascontiguousarray(np.take(a.values, i, axis=axis))
    in_shape = a.shape

    def bwd(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        sl = [slice(None)] * len(in_shape)
        sl[axis] = i
        full[tuple(sl)] = g
        return (full,)

    return apply_primitive((a,), out, bwd)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE))
