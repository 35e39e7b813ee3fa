"""Reverse-mode automatic differentiation over numpy arrays.

Values are immutable :class:`Tensor` objects. Operations executed while a
:class:`Tape` is active are appended to it in execution order, which is a
valid topological order, so :func:`backward` is a single reverse sweep that
touches every recorded operation exactly once.

Float32 is the training dtype; float64 is required by :func:`grad_check`
(finite differences in f32 are too noisy to be a useful oracle).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "backward",
    "grad_check",
    "NonFiniteError",
    "DimensionError",
    "set_check_finite",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "tsum",
    "tmean",
    "reshape",
    "concat",
    "take_rows",
    "exp",
    "log",
    "tabs",
    "relu",
    "softplus",
    "sigmoid_np",
    "logsumexp",
]

_FLOATS = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class DimensionError(ValueError):
    """Shapes are incompatible with the requested operation."""


_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> bool:
    """Toggle the per-op finiteness guard; returns the previous setting."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    return prev


class Tensor:
    """An n-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOATS:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"

    # arithmetic sugar; the functional forms below do the real work
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops plus the registry of parameters
    whose gradients :func:`backward` must produce."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, *tensors: Tensor) -> None:
        """Register parameters; backward() reports a gradient for each,
        zero when the loss does not depend on them."""
        for t in tensors:
            t.requires_grad = True
            self._watched.append(t)

    @property
    def watched(self) -> list[Tensor]:
        return list(self._watched)

    def __len__(self) -> int:
        return len(self._records)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach an op to the active tape (no-op outside a tape or when no
    input is tracked). ``backward_fn(grad_out)`` must return one gradient
    array (or None) per input."""
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._records.append((out, tuple(inputs), backward_fn))
    return out


def _finite_or_raise(arr: np.ndarray, op: str) -> np.ndarray:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


def backward(tape: Tape, loss: Tensor) -> list[np.ndarray]:
    """Reverse sweep over the tape.

    Returns gradients aligned with ``tape.watched`` (also stored on each
    parameter's ``.grad``); parameters the loss does not reach get zeros.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            acc = grads.get(id(t))
            grads[id(t)] = ig if acc is None else acc + ig
    result = []
    for p in tape._watched:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        result.append(g)
    return result


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise DimensionError(f"mixed dtypes not supported: {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(a.data * b.data)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(out, (a, b), back)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = Tensor(_finite_or_raise(a.data / b.data, "div"))

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return record(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return record(Tensor(-a.data), (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out_data = _finite_or_raise(np.exp(a.data), "exp")
    out = Tensor(out_data)
    return record(out, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    out = Tensor(_finite_or_raise(out_data, "log"))
    return record(out, (a,), lambda g: (g / a.data,))


def tabs(a: Tensor) -> Tensor:
    """|x| with the subgradient convention d|x|/dx = sign(x) (0 at 0)."""
    out = Tensor(np.abs(a.data))
    return record(out, (a,), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0))
    return record(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function on raw arrays."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), stabilized so inputs in [-1e4, 1e4] never overflow."""
    x = a.data
    out = Tensor(np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x))))
    return record(out, (a,), lambda g: (g * sigmoid_np(x).astype(x.dtype),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims, dtype=a.dtype))

    def back(g):
        return (_expand_reduced(g, a.shape, axis, keepdims).astype(a.dtype, copy=False),)

    return record(out, (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims, dtype=a.dtype))
    count = a.size if axis is None else a.data.size // out.size

    def back(g):
        full = _expand_reduced(g, a.shape, axis, keepdims).astype(a.dtype, copy=False)
        return (full / a.dtype.type(count),)

    return record(out, (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    _check_same_dtype(*ts)
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return record(out, tuple(ts), back)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows along axis 0; the gradient scatter-adds back (so repeated
    indices accumulate)."""
    idx = np.asarray(indices)
    out = Tensor(np.ascontiguousarray(a.data[idx]))

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return record(out, (a,), back)


def logsumexp(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Stabilized log-sum-exp; gradient is the softmax of the inputs."""
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    out_keep = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis) if axis is not None else out_keep.reshape(())
    out = Tensor(out_data)
    soft = np.exp(x - out_keep)

    def back(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) * soft,)

    return record(out, (a,), back)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Compare the reverse-mode gradient of scalar-valued ``f`` at ``point``
    against central finite differences, coordinate by coordinate.

    Returns the maximum error |ad - fd| / max(|ad|, |fd|, 1); the unit floor
    keeps near-zero coordinates from dividing FD noise by itself. ``point``
    must be float64.
    """
    if point.dtype != np.float64:
        raise DimensionError("grad_check requires a float64 point")
    x0 = point.data.copy()
    leaf = Tensor(x0, requires_grad=True)
    with Tape() as tape:
        tape.watch(leaf)
        out = f(leaf)
    if out.size != 1:
        raise DimensionError("grad_check requires a scalar-valued function")
    (ad,) = backward(tape, out)

    fd = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - h
        lo = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        fd.reshape(-1)[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1.0)
    return float(np.max(np.abs(ad - fd) / denom))


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Plain central-difference gradient of a scalar function on raw arrays."""
    fd = np.empty_like(x)
    flat = x.reshape(-1)
    out = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * h)
    return fd


def log_constant(value: float) -> float:
    """Convenience for tests: natural log as float."""
    return math.log(value)
