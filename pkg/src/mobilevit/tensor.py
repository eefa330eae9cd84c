"""Dense float32 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous ``float32`` numpy array of rank at most
four. While the tape is enabled (the default), every op that touches a tensor
with ``requires_grad`` records a node holding its inputs and a backward rule;
:func:`backward` walks those nodes in reverse creation order. Inference runs
under :func:`no_grad` and records nothing.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float32
MAX_RANK = 4

_ids = itertools.count(1)
_tape_enabled = True
_keep_float64 = False


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    global _tape_enabled
    prev, _tape_enabled = _tape_enabled, False
    try:
        yield
    finally:
        _tape_enabled = prev


@contextlib.contextmanager
def enable_grad():
    global _tape_enabled
    prev, _tape_enabled = _tape_enabled, True
    try:
        yield
    finally:
        _tape_enabled = prev


def is_grad_enabled() -> bool:
    return _tape_enabled


@contextlib.contextmanager
def float64_eval():
    """Let float64 arrays flow through ops unconverted (finite-difference oracle only)."""
    global _keep_float64
    prev, _keep_float64 = _keep_float64, True
    try:
        yield
    finally:
        _keep_float64 = prev


@dataclass
class GradRecord:
    """The tape entry for one recorded op."""

    node_id: int
    op: str
    inputs: tuple
    backward: Callable = field(repr=False)
    saved: dict = field(default_factory=dict, repr=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "record", "id", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if _keep_float64 and getattr(data, "dtype", None) == np.float64:
            arr = np.ascontiguousarray(data)
        else:
            arr = np.ascontiguousarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the maximum of {MAX_RANK}")
        if arr.ndim and min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.record: GradRecord | None = None
        self.id = next(_ids)
        self.name = name

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.record.op}" if self.record else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    @property
    def T(self):
        return permute(self, tuple(reversed(range(self.ndim))))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward: Callable, **saved) -> Tensor:
    """Wrap an op result, recording it on the tape when any input needs grad.

    ``backward(grad)`` must return one gradient array (or None) per input.
    """
    out = Tensor(data)
    if _tape_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.record = GradRecord(out.id, op, tuple(inputs), backward, saved)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b), "add",
                lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data - b.data, (a, b), "sub",
                lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data * b.data, (a, b), "mul",
                lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make(out, (a, b), "div",
                lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out = x.data * s
    return make(out, (x,), "swish", lambda g: (g * (s + out * (1.0 - s)),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return (0.5 * (1.0 + np.tanh(0.5 * z))).astype(z.dtype, copy=False)


# -- linear algebra and reductions ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make(out, (a, b), "matmul", backward)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make(out, (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(x.shape),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(np.transpose(x.data, axes), (x,), "permute",
                lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[idx] = g
        return (full,)

    return make(np.asarray(x.data[idx]), (x,), "getitem", backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make(out, tensors, "concat", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make(out, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make(out, (x,), "log_softmax",
                lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- differentiation ------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        if node.record is not None:
            for parent in node.record.inputs:
                if parent.requires_grad and parent.id not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> dict:
    """Differentiate a scalar ``root`` with respect to everything on its tape.

    Returns ``{node id: gradient array}`` for every node reached, and stores
    the gradient of each leaf in its ``.grad`` (accumulating across calls).
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {root.id: np.ones(root.shape, dtype=DTYPE)}
    if not root.requires_grad:
        return grads
    for node in reversed(_topo_order(root)):
        g = grads.get(node.id)
        if g is None:
            continue
        rec = node.record
        if rec is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(rec.inputs, rec.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
               n_samples: int | None = 16, seed: int = 0, numeric_dtype=np.float64) -> float:
    """Worst relative error between ``backward`` and central differences.

    The analytic side is the float32 backward pass. The central differences
    run in ``numeric_dtype`` (float64 by default, so the oracle's own rounding
    sits far below the tolerance). ``x`` is perturbed in place and restored,
    so ``f`` may close over a module whose parameter *is* ``x``. Indices are
    sampled without replacement; ``n_samples=None`` checks every element.

    Raises:
        FloatingPointError: if any analytic or numeric value is not finite.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    orig = x.data
    try:
        with enable_grad():
            out = f(x)
            grads = backward(out)
        analytic = grads.get(x.id, np.zeros(x.shape, dtype=DTYPE)).reshape(-1)
        if n_samples is None or n_samples >= x.size:
            idx = np.arange(x.size)
        else:
            idx = np.random.default_rng(seed).choice(x.size, n_samples, replace=False)
        work = orig.astype(numeric_dtype)
        flat = work.reshape(-1)
        x.data = work
        worst = 0.0
        ctx = float64_eval() if numeric_dtype == np.float64 else contextlib.nullcontext()
        with no_grad(), ctx:
            for i in idx:
                base = flat[i]
                flat[i] = base + eps
                fp = float(f(x).data.sum(dtype=np.float64))
                flat[i] = base - eps
                fm = float(f(x).data.sum(dtype=np.float64))
                flat[i] = base
                num = (fp - fm) / (2 * eps)
                ana = float(analytic[i])
                if not (np.isfinite(num) and np.isfinite(ana)):
                    raise FloatingPointError(f"non-finite gradient at flat index {int(i)}: analytic={ana}, numeric={num}")
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
        return worst
    finally:
        x.data = orig
        x.requires_grad = was
        x.grad = None
