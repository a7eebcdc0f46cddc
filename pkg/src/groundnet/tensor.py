"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. ``Tape.backward`` replays the records in reverse
order and accumulates gradients into ``Tensor.grad``.

    >>> with Tape() as tape:
    ...     x = Tensor([1.0, 2.0], requires_grad=True)
    ...     y = sum(x * x)
    ...     tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

L2_EPS = 1e-8


class ShapeMismatch(ValueError):
    pass


class NonFiniteValue(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scalar_scale(_lift(other), -1.0))

    def __rsub__(self, other):
        return add(_lift(other), scalar_scale(self, -1.0))

    def __neg__(self):
        return scalar_scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_scale(self, 1.0 / other)
        return div(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    A tape belongs to one thread. Parameters may be shared by several tapes
    as long as only one of them is being differentiated at a time.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> Tape:
        stack = Tape._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    @classmethod
    def _stack(cls) -> list[Tape]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def current(cls) -> Tape | None:
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, parents, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(x) into ``x.grad`` for every tensor on the tape."""
        if seed is None:
            if loss.size != 1:
                raise ShapeMismatch(f"backward from non-scalar of shape {loss.shape} needs a seed")
            seed = np.ones_like(loss.data)
        _accumulate(loss, np.asarray(seed, dtype=np.float64))
        for out, parents, fn in reversed(self.records):
            if out.grad is None:
                continue
            for parent, g in zip(parents, fn(out.grad)):
                if g is not None and parent.requires_grad:
                    _accumulate(parent, g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check(values: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{op} produced a non-finite value")
    return values


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(_check(data, op))
    tape = Tape.current()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- core ops ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "add")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "mul")
    return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


elementwise_mul = mul


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcastable(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def scalar_scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, "scalar_scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (numpy semantics)."""
    if a.data.ndim == 0 or b.data.ndim == 0 or a.data.ndim > 2 or b.data.ndim > 2:
        raise ShapeMismatch(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _make(A @ B, "matmul", (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeMismatch("concat of nothing")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {e}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"stack: {e}") from None

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, "stack", tensors, backward)


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; the gradient scatters back."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), "take", (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {e}") from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, "transpose", (a,), lambda g: (g.T,))


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), "sum", (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """``z / (||z|| + eps)``; zero vectors stay zero."""
    z = a.data
    norm = np.sqrt((z * z).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = z / denom

    def backward(g):
        dot = (z * g).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - z * dot / (denom * denom * safe),)

    return _make(out, "l2_normalize", (a,), backward)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows of ``table`` for the integer ``ids`` (shape ``len(ids) x E``)."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch(f"embedding ids outside [0, {table.shape[0]})")
    out = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(out, "embedding_lookup", (table,), backward)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, weight: Tensor, bias: Tensor) -> tuple[Tensor, Tensor]:
    """One gated recurrent step, gate rows ordered input, forget, output, candidate.

    ``weight`` is ``4H x (D + H)`` acting on ``[x; h]``. Built from the core
    ops above so that its gradient is the composition of theirs.
    """
    hidden = h.shape[-1]
    gates = add(matmul(weight, concat([x, h])), bias)
    i = sigmoid(take(gates, slice(0, hidden)))
    f = sigmoid(take(gates, slice(hidden, 2 * hidden)))
    o = sigmoid(take(gates, slice(2 * hidden, 3 * hidden)))
    cand = tanh(take(gates, slice(3 * hidden, 4 * hidden)))
    c_new = add(mul(f, c), mul(i, cand))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# -- initialization and verification ---------------------------------------


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Independent deterministic generator for ``(seed, stream)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(stream,))))


def xavier_init(shape: tuple[int, int], rng_seed: int | np.random.Generator, name: str | None = None) -> Tensor:
    """Uniform Glorot initialization in +-sqrt(6 / (fan_in + fan_out))."""
    if len(shape) != 2:
        raise ShapeMismatch(f"xavier_init needs a 2-D shape, got {shape}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else rng_stream(int(rng_seed))
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor | np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_ad| + |g_fd|)``.
    """
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
        if y.size != 1:
            raise ShapeMismatch(f"grad_check needs a scalar function, got shape {y.shape}")
        tape.backward(y)
    g_ad = x.grad if x.grad is not None else np.zeros_like(x0)

    g_fd = np.zeros_like(x0)
    flat = g_fd.reshape(-1)
    for k in range(x0.size):
        xp = x0.copy().reshape(-1)
        xp[k] += h
        xm = x0.copy().reshape(-1)
        xm[k] -= h
        fp = fn(Tensor(xp.reshape(x0.shape))).item()
        fm = fn(Tensor(xm.reshape(x0.shape))).item()
        flat[k] = (fp - fm) / (2 * h)
    _check(g_fd, "finite difference")
    err = np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_ad) + np.abs(g_fd))
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """:func:`grad_check` over every coordinate of several parameter tensors.

    ``max_coords`` samples that many coordinates per tensor (with ``rng``)
    instead of checking all of them.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    worst = 0.0
    for p in params:
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = range(p.size)
        if max_coords is not None and p.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(p.size, size=max_coords, replace=False)
        flat = p.data.reshape(-1)
        for k in coords:
            orig = flat[k]
            flat[k] = orig + h
            fp = loss_fn().item()
            flat[k] = orig - h
            fm = loss_fn().item()
            flat[k] = orig
            g_fd = (fp - fm) / (2 * h)
            ga = g_ad.reshape(-1)[k]
            worst = max(worst, abs(ga - g_fd) / max(1.0, abs(ga) + abs(g_fd)))
    for p in params:
        p.grad = None
    return worst
