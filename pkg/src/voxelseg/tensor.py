"""Dense float tensors with tape-based reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 in the
high-precision check mode) plus an optional gradient slot.  Differentiable
primitives append a record to a global tape; :func:`backward` walks the tape
in reverse, accumulating gradients into every tensor that requires them, and
clears the tape when done.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created tensors (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported tensor dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the default tensor dtype (used by the f64 gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (eval forwards, data prep)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional float array with an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id")
    _ids = itertools.count()

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(Tensor._ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of primitive applications; append order is execution order,
    so reversed iteration is a valid topological order."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def clear(self) -> None:
        self.records.clear()

    def __len__(self):
        return len(self.records)


_TAPE = Tape()


def active_tape() -> Tape:
    return _TAPE


def record(op: str, inputs, output: Tensor, backward_fn) -> Tensor:
    """Register a primitive application if recording is on and any input needs grad.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per input.
    """
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _TAPE.records.append(TapeRecord(op, tuple(inputs), output, backward_fn))
    return output


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Populates ``.grad`` (accumulating into any existing value) on every
    recorded tensor with ``requires_grad``; each tape record is visited at
    most once; the tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.data.shape}")
    pending = {loss.node_id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {loss.node_id: loss}
    try:
        for rec in reversed(_TAPE.records):
            grad_out = pending.pop(rec.output.node_id, None)
            if grad_out is None:
                continue  # not on a path to the loss
            _accumulate_into(rec.output, grad_out)
            for t, g in zip(rec.inputs, rec.backward_fn(grad_out)):
                if g is None or not t.requires_grad:
                    continue
                held = pending.get(t.node_id)
                pending[t.node_id] = g if held is None else held + g
                leaves[t.node_id] = t
        for node_id, g in pending.items():
            _accumulate_into(leaves[node_id], g)
    finally:
        _TAPE.clear()


def _accumulate_into(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _needs(*tensors) -> tuple[bool, ...]:
    return tuple(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data)
    return record("add", (a, b), out, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data - b.data)
    return record("sub", (a, b), out, lambda g: (g, -g))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return record("neg", (a,), out, lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a python scalar."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        scale = a.data.dtype.type(b)
        out = Tensor(a.data * scale)
        return record("scale", (a,), out, lambda g: (g * scale,))
    b = _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data)
    return record("mul", (a, b), out, lambda g: (g * b.data, g * a.data))


def tsum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(dtype=np.float64))

    def bw(g):
        return (np.full_like(a.data, g.reshape(())),)

    return record("sum", (a,), out, bw)


def tmean(a: Tensor, axes=None) -> Tensor:
    """Mean over ``axes`` (all axes when None), without keepdims."""
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = Tensor(a.data.mean(axis=axes, dtype=np.float64))

    def bw(g):
        g_expanded = np.expand_dims(g, axes) if axes else g
        return ((np.broadcast_to(g_expanded, a.data.shape) / count).astype(a.data.dtype),)

    return record("mean", (a,), out, bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", tuple(tensors), out, bw)
