"""Rank-4 tensors and a define-by-run reverse-mode tape.

Every value in the engine is a ``Tensor`` of shape ``(n, c, h, w)``.  Ops
executed while a :class:`Tape` is active, and touching at least one tensor
that requires a gradient, append a :class:`Node` to that tape.  Calling
:func:`backward` walks the tape once in reverse order.

Forward state is float32.  Inside :func:`shadow64` newly created tensors
are float64, which is what the finite-difference checks run under.
"""

import os
import threading
from contextlib import contextmanager

import numpy as np

from .errors import AxisError, ContractError, ShapeError

_local = threading.local()
DEBUG = os.environ.get("VESSELNET_DEBUG", "") not in ("", "0")


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextmanager
def shadow64():
    """Create tensors in float64 for the duration of the block."""
    previous = default_dtype()
    _local.dtype = np.float64
    try:
        yield
    finally:
        _local.dtype = previous


def _as4d(arr):
    if arr.ndim > 4:
        raise ShapeError(f"tensors are rank 4 at most, got shape {arr.shape}")
    if arr.ndim < 4:
        arr = arr.reshape((1,) * (4 - arr.ndim) + arr.shape)
    if min(arr.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got {arr.shape}")
    return arr


class Tensor:
    """Immutable dense ``(n, c, h, w)`` array.

    Lower-rank input is left-padded with unit dimensions, so ``Tensor(3.0)``
    is a ``(1, 1, 1, 1)`` scalar.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=default_dtype())
        arr = _as4d(arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr, name=None):
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = name
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return np.array(self.data)

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype):
        t = Tensor._wrap(self.data.astype(dtype), self.name)
        t.requires_grad = self.requires_grad
        return t

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


class Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op}, out={self.output.shape})"


class Tape:
    """Ordered record of differentiable ops for one training step."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, root):
        return backward(self, root)

    def first_nonfinite(self):
        """Return the first node whose output contains NaN or Inf, else None."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node
        return None


def current_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording onto any active tape."""
    stack = getattr(_local, "tapes", None)
    saved = list(stack) if stack else []
    _local.tapes = []
    try:
        yield
    finally:
        _local.tapes = saved


def apply(op, inputs, out, backward_fn):
    """Wrap ``out`` as a tensor and record it if any input needs a gradient.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if DEBUG and not np.all(np.isfinite(out)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    result = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        tape.record(Node(op, tuple(inputs), result, backward_fn))
    return result


class Gradients:
    """Gradient lookup keyed by tensor; unreached tensors report zeros."""

    def __init__(self):
        self._grads = {}

    def __getitem__(self, tensor):
        entry = self._grads.get(id(tensor))
        if entry is None or entry[0] is not tensor:
            return np.zeros_like(tensor.data)
        return entry[1]

    def __contains__(self, tensor):
        entry = self._grads.get(id(tensor))
        return entry is not None and entry[0] is tensor

    def _get(self, tensor):
        entry = self._grads.get(id(tensor))
        return None if entry is None else entry[1]

    def _accumulate(self, tensor, grad):
        if grad.shape != tensor.shape:
            raise ShapeError(f"gradient shape {grad.shape} != tensor shape {tensor.shape}")
        entry = self._grads.get(id(tensor))
        if entry is None:
            self._grads[id(tensor)] = (tensor, grad)
        else:
            self._grads[id(tensor)] = (tensor, entry[1] + grad)


def backward(tape, root):
    """Reverse-mode sweep from the scalar ``root`` over ``tape``."""
    if root.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads = Gradients()
    grads._accumulate(root, np.ones_like(root.data))
    for node in reversed(tape.nodes):
        g = grads._get(node.output)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is not None and inp.requires_grad:
                grads._accumulate(inp, np.asarray(gi, dtype=inp.dtype))
    return grads


# -- elementwise -----------------------------------------------------------


def _is_scalar(v):
    return not isinstance(v, Tensor)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        s = float(b)
        return apply("add_scalar", (a,), a.data + a.dtype.type(s), lambda g: (g,))
    _check_same(a, b, "add")
    return apply("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    if _is_scalar(a):
        s = float(a)
        return apply("rsub_scalar", (b,), b.dtype.type(s) - b.data, lambda g: (-g,))
    if _is_scalar(b):
        s = float(b)
        return apply("sub_scalar", (a,), a.data - a.dtype.type(s), lambda g: (g,))
    _check_same(a, b, "sub")
    return apply("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scalar_mul(a, s):
    s = a.dtype.type(s)
    return apply("scalar_mul", (a,), a.data * s, lambda g: (g * s,))


def mul(a, b):
    if _is_scalar(a):
        a, b = b, a
    if _is_scalar(b):
        return scalar_mul(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return apply("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a, b):
    if _is_scalar(b):
        return scalar_mul(a, 1.0 / float(b))
    if _is_scalar(a):
        s = b.dtype.type(a)
        bd = b.data
        return apply("rdiv_scalar", (b,), s / bd, lambda g: (-g * s / (bd * bd),))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return apply("div", (a, b), out, lambda g: (g / bd, -g * out / bd))


def clamp(a, lo, hi):
    if not lo < hi:
        raise ContractError(f"clamp needs lo < hi, got [{lo}, {hi}]")
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    out = np.clip(ad, a.dtype.type(lo), a.dtype.type(hi))
    return apply("clamp", (a,), out, lambda g: (g * inside,))


def log(a):
    ad = a.data
    return apply("log", (a,), np.log(ad), lambda g: (g / ad,))


def sqrt(a):
    out = np.sqrt(a.data)
    return apply("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


# -- reductions ------------------------------------------------------------


def _normalize_axes(axes):
    if axes is None:
        return (0, 1, 2, 3)
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    out = []
    for ax in axes:
        if not isinstance(ax, (int, np.integer)) or not -4 <= ax < 4:
            raise AxisError(f"invalid axis {ax!r} for a rank-4 tensor")
        out.append(int(ax) % 4)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {axes!r}")
    return tuple(sorted(out))


def reduce(op, a, axes=None):
    """Sum or mean over ``axes`` (default: all), keeping rank 4."""
    axes = _normalize_axes(axes)
    shape = a.shape
    if op == "sum":
        out = a.data.sum(axis=axes, keepdims=True)
        return apply("sum", (a,), out, lambda g: (np.broadcast_to(g, shape).copy(),))
    if op == "mean":
        count = int(np.prod([shape[ax] for ax in axes]))
        out = a.data.mean(axis=axes, keepdims=True)
        scale = a.dtype.type(1.0 / count)
        return apply("mean", (a,), out, lambda g: (np.broadcast_to(g * scale, shape).copy(),))
    raise ContractError(f"unknown reduction {op!r}")


def sum(a, axes=None):  # noqa: A001 - mirrors numpy naming
    return reduce("sum", a, axes)


def mean(a, axes=None):
    return reduce("mean", a, axes)
