"""Dense float64 tensors with a dynamic reverse-mode tape.

Operations run eagerly. When a :class:`Tape` is active on the current thread
and at least one input requires a gradient, the op is appended to the tape
together with a closure holding whatever forward values its backward rule
needs. ``Tape.backward(root)`` then walks the records in reverse.

Broadcasting is deliberately narrow: operands of elementwise ops must have the
same shape, or one of them is a scalar, or one of them is a vector matching
the last axis of the other (a bias broadcast over the batch axis).

>>> t = Tensor([1.0, 2.0], requires_grad=True)
>>> with Tape() as tape:
...     y = (t * t).sum()
>>> tape.backward(y)
>>> t.grad
array([2., 4.])
"""

import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class GraphError(RuntimeError):
    """Misuse of a tape: double backward, foreign root, stale inputs."""


class NonDeterministicError(ValueError):
    """Two evaluations of the same function at the same point disagreed."""


_local = threading.local()


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._tape = None

    @classmethod
    def _wrap(cls, arr, requires_grad=False, tape=None):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t._tape = tape
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._tape is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def square(self):
        return square(self)


@dataclass
class Node:
    """One recorded op: kind, inputs, output and its backward closure."""

    kind: str
    inputs: tuple
    out: Tensor
    backward: Callable


class Tape:
    """Records ops executed while it is the active tape of this thread."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._outer = None

    def __enter__(self):
        if self.consumed:
            raise GraphError("tape already consumed by backward; record a new one")
        self._outer = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._outer
        self._outer = None
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, out_arr, backward):
        out = Tensor._wrap(out_arr, requires_grad=True, tape=self)
        self.nodes.append(Node(kind, inputs, out, backward))
        return out

    def backward(self, root):
        """Fill ``.grad`` of every leaf reached from ``root`` with d(root)/d(leaf)."""
        if self.consumed:
            raise GraphError("backward already run on this recording")
        if not isinstance(root, Tensor) or root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {getattr(root, 'shape', None)}")
        if root._tape is not self:
            raise GraphError("root was not recorded on this tape")

        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t._tape is None:
                    t.grad = np.zeros_like(t.data)

        grads = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is None:
                    t.grad += gi
                else:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
        self.consumed = True
        self.nodes = []


def backward(tape, root):
    tape.backward(root)


def active_tape():
    return getattr(_local, "tape", None)


class no_grad:
    """Suspend recording on this thread."""

    def __enter__(self):
        self._outer = getattr(_local, "tape", None)
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._outer
        return False


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind, inputs, out_arr, backward):
    _check_finite(out_arr, f"output of {kind}")
    tape = getattr(_local, "tape", None)
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(out_arr)
    for t in inputs:
        if t.requires_grad and t._tape is not None and t._tape is not tape:
            raise GraphError(f"{kind}: input was recorded on a different tape")
    return tape.record(kind, inputs, out_arr, backward)


def _bcast(kind, sa, sb):
    if sa == sb:
        return sa
    if sb == ():
        return sa
    if sa == ():
        return sb
    if len(sb) == 1 and len(sa) >= 2 and sa[-1] == sb[0]:
        return sa
    if len(sa) == 1 and len(sb) >= 2 and sb[-1] == sa[0]:
        return sb
    raise ShapeError(f"{kind}: shapes {sa} and {sb} do not conform")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.reshape(-1, shape[0]).sum(axis=0)


# elementwise ---------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _bcast("mul", a.shape, b.shape)
    av, bv = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _emit("mul", (a, b), av * bv, back)


def square(a):
    a = as_tensor(a)
    av = a.data
    return _emit("square", (a,), av * av, lambda g: (2.0 * av * g,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


# linear algebra and reductions ----------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.data, b.data

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _emit("matmul", (a, b), av @ bv, back)


def tsum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape
    if axis is not None and not -len(shape) <= axis < len(shape):
        raise ShapeError(f"sum: axis {axis} out of range for shape {shape}")

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis)), back)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", ts, out, back)


def _basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def take(a, idx):
    """Basic (slice/integer) indexing; fancy indexing is rejected."""
    a = as_tensor(a)
    if not _basic_index(idx):
        raise ShapeError("only basic slicing/integer indexing is supported")
    shape = a.shape
    try:
        out = np.array(a.data[idx])
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    def back(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _emit("slice", (a,), out, back)


# fused kernels --------------------------------------------------------------


def gru_cell(x, h, W, U, b):
    """One GRU step, ``h' = (1-z) * n + z * h``; forward and backward are kernels."""
    x, h, W, U, b = (as_tensor(t) for t in (x, h, W, U, b))
    B, I = x.shape
    Hs = h.shape[1]
    if h.shape[0] != B or W.shape != (I, 3 * Hs) or U.shape != (Hs, 3 * Hs) or b.shape != (3 * Hs,):
        raise ShapeError(
            f"gru_cell: x{x.shape} h{h.shape} W{W.shape} U{U.shape} b{b.shape} do not conform"
        )
    k = kernels.active
    h_new, z, r, n = k.gru_forward(x.data, h.data, W.data, U.data, b.data)

    def back(g):
        return k.gru_backward(g, x.data, h.data, W.data, U.data, z, r, n)

    return _emit("gru_cell", (x, h, W, U, b), h_new, back)


def lstm_cell(x, hc, W, U, b):
    """One LSTM step on the packed state ``hc = [h | c]``; returns packed ``[h' | c']``."""
    x, hc, W, U, b = (as_tensor(t) for t in (x, hc, W, U, b))
    B, I = x.shape
    Hs = hc.shape[1] // 2
    if hc.shape != (B, 2 * Hs) or W.shape != (I, 4 * Hs) or U.shape != (Hs, 4 * Hs) or b.shape != (4 * Hs,):
        raise ShapeError(
            f"lstm_cell: x{x.shape} hc{hc.shape} W{W.shape} U{U.shape} b{b.shape} do not conform"
        )
    k = kernels.active
    h, c = hc.data[:, :Hs], hc.data[:, Hs:]
    h_new, c_new, i, f, gg, o, tc = k.lstm_forward(x.data, h, c, W.data, U.data, b.data)

    def back(g):
        dx, dh, dc, dW, dU, db = k.lstm_backward(
            g[:, :Hs], g[:, Hs:], x.data, h, c, W.data, U.data, i, f, gg, o, tc
        )
        return dx, np.concatenate([dh, dc], axis=1), dW, dU, db

    return _emit("lstm_cell", (x, hc, W, U, b), np.concatenate([h_new, c_new], axis=1), back)


def quad_penalty(theta, anchors, weights, coef):
    """``coef/2 * sum_e sum_i weights[e,i] * (theta_i - anchors[e,i])**2`` as a scalar op."""
    theta = as_tensor(theta)
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(weights, dtype=np.float64))
    if theta.ndim != 1 or anchors.shape != weights.shape or anchors.shape[1] != theta.shape[0]:
        raise ShapeError(
            f"quad_penalty: theta{theta.shape} anchors{anchors.shape} weights{weights.shape}"
        )
    value, grad = kernels.active.quad_penalty(theta.data, anchors, weights, float(coef))
    return _emit("quad_penalty", (theta,), np.asarray(value), lambda g: (g * grad,))


# gradient check ------------------------------------------------------------


def finite_difference_check(f, theta, h=1e-5):
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a 1-D Tensor to a scalar Tensor. The error per coordinate is
    ``|g_tape - g_fd| / (|g_fd| + 1e-12)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-7, 1e-4]")
    theta = np.array(theta, dtype=np.float64).reshape(-1)

    def value(v):
        with no_grad():
            out = f(Tensor(v))
        return float(as_tensor(out).data.reshape(-1)[0])

    f0 = value(theta)
    if value(theta) != f0:
        raise NonDeterministicError("f returned different values at the same point")

    leaf = Tensor(theta, requires_grad=True)
    with Tape() as tape:
        root = f(leaf)
    if not isinstance(root, Tensor) or root.is_leaf:
        g_tape = np.zeros_like(theta)
    else:
        tape.backward(root)
        g_tape = leaf.grad

    g_fd = np.empty_like(theta)
    probe = theta.copy()
    for i in range(theta.size):
        probe[i] = theta[i] + h
        up = value(probe)
        probe[i] = theta[i] - h
        down = value(probe)
        probe[i] = theta[i]
        g_fd[i] = (up - down) / (2.0 * h)
    if theta.size == 0:
        return 0.0
    return float(np.max(np.abs(g_tape - g_fd) / (np.abs(g_fd) + 1e-12)))
