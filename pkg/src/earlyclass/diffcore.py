"""Small reverse-mode autodiff engine over dense float64 arrays.

Arrays have rank <= 2. Binary ops accept operands whose shapes are equal or
differ only by a missing leading (batch) dimension, plus 0-d constants.

Every op result remembers its inputs and a local-gradient rule together with a
monotonically increasing sequence number. :class:`Tape` collects the ops that
lead to a loss in recording order and :func:`backward` replays them in reverse.

    >>> w = Value([[1.0, 2.0]], requires_grad=True)
    >>> loss = reduce("sum", mul(w, w))
    >>> backward(loss)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import contextlib
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LOG_CLAMP = (1e-8, 1.0)

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of the function."""


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them (inference)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Value:
    """A dense array with an optional gradient and a link to the op that made it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim > 2:
            raise ShapeError(f"rank {arr.ndim} arrays are not supported (max 2)")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, op={self._op})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: Sequence[Value], backward: Callable, op: str) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.name = None
    out._seq = next(_seq)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    if grad.shape != shape:
        # size-1 axes of a 0-d or (1,) operand
        grad = grad.sum(axis=tuple(i for i, n in enumerate(shape) if n == 1), keepdims=True)
    return grad.reshape(shape)


def _check_binary(op: str, a: Value, b: Value) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    longer, shorter = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if longer[len(longer) - len(shorter):] == shorter:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_binary("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_binary("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_binary("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Value:
    a = as_value(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Value:
    a = as_value(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Value:
    a = as_value(a)
    # tanh form avoids overflow in exp for large |x|
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Value:
    a = as_value(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def log(a) -> Value:
    a = as_value(a)
    if np.any(a.data <= 0):
        bad = a.data[a.data <= 0].ravel()[0]
        raise DomainError(f"log: non-positive entry {bad!r}; clamp probabilities first")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp(a, lo: float, hi: float) -> Value:
    """Clip to [lo, hi]; gradient passes only where the input was inside."""
    a = as_value(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def safe_log(a) -> Value:
    return log(clamp(a, *LOG_CLAMP))


def elementwise(op: str, *args) -> Value:
    """Dispatch by name: add, sub, mul, neg, sigmoid, tanh, log, scale."""
    table = {
        "add": add,
        "sub": sub,
        "mul": mul,
        "neg": neg,
        "sigmoid": sigmoid,
        "tanh": tanh,
        "log": log,
        "scale": scale,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def softmax(a) -> Value:
    """Softmax over the last axis (row-wise for batches)."""
    a = as_value(a)
    if a.data.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax: non-finite logits")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


def reduce(op: str, a) -> Value:
    """Reduce all entries to a 0-d scalar with ``sum`` or ``mean``."""
    a = as_value(a)
    n = a.data.size
    if n == 0:
        raise ValueError(f"{op} of an empty array")
    if op == "sum":
        return _make(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")
    if op == "mean":
        return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")
    raise ValueError(f"unknown reduction {op!r}")


def columns(a, start: int, stop: int) -> Value:
    """Slice ``a[..., start:stop]``."""
    a = as_value(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop].copy(), (a,), bw, "columns")


def column(a, j: int) -> Value:
    """Column ``j`` of a 2-d value as a vector."""
    a = as_value(a)
    if a.data.ndim != 2:
        raise ShapeError(f"column: expected rank 2, got {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, j] = g
        return (full,)

    return _make(a.data[:, j].copy(), (a,), bw, "column")


def pick(a, index) -> Value:
    """Per-row gather ``a[i, index[i]]`` (or ``a[index]`` for a vector)."""
    a = as_value(a)
    idx = np.asarray(index, dtype=np.intp)
    if a.data.ndim == 1:
        if idx.ndim != 0:
            raise ShapeError("pick on a vector takes a scalar index")
        if not 0 <= idx < a.shape[0]:
            raise IndexError(f"class index {int(idx)} out of range [0, {a.shape[0]})")
        out = a.data[idx].copy()
        rows = None
    else:
        if idx.shape != (a.shape[0],):
            raise ShapeError(f"pick: {idx.shape} indices for {a.shape} rows")
        if np.any(idx < 0) or np.any(idx >= a.shape[1]):
            raise IndexError(f"class index out of range [0, {a.shape[1]})")
        rows = np.arange(a.shape[0])
        out = a.data[rows, idx]

    def bw(g):
        full = np.zeros_like(a.data)
        if rows is None:
            full[idx] = g
        else:
            full[rows, idx] = g
        return (full,)

    return _make(np.asarray(out), (a,), bw, "pick")


def layer_norm(x, gain, offset, eps: float = 1e-5) -> Value:
    """gain * (x - mean) / sqrt(var + eps) + offset over the last axis."""
    x, gain, offset = as_value(x), as_value(gain), as_value(offset)
    h = x.shape[-1]
    if gain.shape != (h,) or offset.shape != (h,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}, {offset.shape} for width {h}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, offset.shape)

    return _make(xhat * gain.data + offset.data, (x, gain, offset), bw, "layer_norm")


def lstm_step(x, h_prev, c_prev, w_ih, w_hh, bias) -> Value:
    """Fused LSTM step returning the state ``[h | c]`` as one (B, 2H) value.

    Gate order in the weight columns is input, forget, candidate, output.
    """
    x, h_prev, c_prev = as_value(x), as_value(h_prev), as_value(c_prev)
    w_ih, w_hh, bias = as_value(w_ih), as_value(w_hh), as_value(bias)
    H = h_prev.shape[-1]
    if (
        x.data.ndim != 2
        or h_prev.shape != (x.shape[0], H)
        or c_prev.shape != h_prev.shape
        or w_ih.shape != (x.shape[1], 4 * H)
        or w_hh.shape != (H, 4 * H)
        or bias.shape != (4 * H,)
    ):
        raise ShapeError(
            f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"w_ih {w_ih.shape}, w_hh {w_hh.shape}, bias {bias.shape}"
        )
    act = x.data @ w_ih.data
    act += h_prev.data @ w_hh.data
    act += bias.data
    sig = act[:, : 2 * H]
    np.multiply(sig, 0.5, out=sig)
    np.tanh(sig, out=sig)
    sig += 1.0
    sig *= 0.5
    np.tanh(act[:, 2 * H : 3 * H], out=act[:, 2 * H : 3 * H])
    o = act[:, 3 * H :]
    np.multiply(o, 0.5, out=o)
    np.tanh(o, out=o)
    o += 1.0
    o *= 0.5
    i, f, g = act[:, :H], act[:, H : 2 * H], act[:, 2 * H : 3 * H]
    state = np.empty((x.shape[0], 2 * H))
    c = state[:, H:]
    np.multiply(f, c_prev.data, out=c)
    c += i * g
    tc = np.tanh(c)
    np.multiply(o, tc, out=state[:, :H])

    def bw(gs):
        dh, dc = gs[:, :H], gs[:, H:]
        dc = dc + dh * o * (1.0 - tc * tc)
        da = np.empty_like(act)
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H : 2 * H] = dc * c_prev.data * f * (1.0 - f)
        da[:, 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        da[:, 3 * H :] = dh * tc * o * (1.0 - o)
        return (
            da @ w_ih.data.T,
            da @ w_hh.data.T,
            dc * f,
            x.data.T @ da,
            h_prev.data.T @ da,
            da.sum(axis=0),
        )

    return _make(state, (x, h_prev, c_prev, w_ih, w_hh, bias), bw, "lstm_step")


def stack_cols(values: Sequence[Value]) -> Value:
    """Stack equal-length vectors as the columns of a matrix."""
    values = [as_value(v) for v in values]
    if not values:
        raise ValueError("stack_cols of nothing")
    n = values[0].shape
    if any(v.shape != n or v.data.ndim != 1 for v in values):
        raise ShapeError("stack_cols: all inputs must be vectors of equal length")

    def bw(g):
        return tuple(g[:, j] for j in range(len(values)))

    return _make(np.stack([v.data for v in values], axis=1), values, bw, "stack_cols")


# ---------------------------------------------------------------------------
# tape and backward


@dataclass
class Tape:
    """The recorded ops leading to one output, in recording order."""

    ops: list[Value] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Value) -> "Tape":
        seen: set[int] = set()
        ops: list[Value] = []
        stack = [out]
        while stack:
            v = stack.pop()
            if id(v) in seen or v._backward is None:
                continue
            seen.add(id(v))
            ops.append(v)
            stack.extend(v._parents)
        ops.sort(key=lambda v: v._seq)
        return cls(ops)

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Value, visit: Callable[[Value], None] | None = None) -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for v in reversed(self.ops):
            g = grads.pop(id(v), None)
            if g is None:
                continue
            if visit is not None:
                visit(v)
            for parent, pg in zip(v._parents, v._backward(g)):
                if not parent.requires_grad:
                    continue
                if parent._backward is None:
                    # leaf: accumulate into .grad
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                else:
                    k = id(parent)
                    if k in grads:
                        grads[k] = grads[k] + pg
                    else:
                        grads[k] = pg


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss._backward is None:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += 1.0
        return
    Tape.from_output(loss).backward(loss)


def zero_grad(params: Iterable[Value]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        denom = max(abs(self.analytic), abs(self.numeric))
        if denom == 0.0:
            return 0.0
        return abs(self.analytic - self.numeric) / denom


@dataclass
class GradCheckReport:
    checks: list[GradCheck]
    tol: float

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol

    def worst(self) -> GradCheck | None:
        return max(self.checks, key=lambda c: c.rel_error, default=None)


def check_gradients(
    f: Callable[[], Value],
    params: dict[str, Value] | Sequence[Value],
    eps: float = 1e-4,
    tol: float = 1e-3,
    n_samples: int | None = None,
    seed: int = 0,
    abs_floor: float = 0.0,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph from the current parameter data on every call.
    With ``n_samples`` set, that many (parameter, entry) pairs are drawn at
    random; otherwise every entry is checked. Entries where both gradients are
    below ``abs_floor`` count as agreeing.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = dict(params) if isinstance(params, dict) else {f"p{i}": p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = np.zeros_like(p.data)
    backward(f())

    entries = [(name, idx) for name, p in named.items() for idx in np.ndindex(p.shape)]
    if n_samples is not None and n_samples < len(entries):
        rng = np.random.default_rng(seed)
        entries = [entries[i] for i in rng.choice(len(entries), size=n_samples, replace=False)]

    checks = []
    with no_grad():
        for name, idx in entries:
            p = named[name]
            orig = p.data[idx]
            p.data[idx] = orig + eps
            fp = f().item()
            p.data[idx] = orig - eps
            fm = f().item()
            p.data[idx] = orig
            num = (fp - fm) / (2 * eps)
            ana = float(p.grad[idx])
            if abs(ana) <= abs_floor and abs(num) <= abs_floor:
                num = ana
            checks.append(GradCheck(name, tuple(int(i) for i in idx), ana, num))
    if not all(math.isfinite(c.numeric) for c in checks):
        raise ValueError("non-finite finite-difference estimate")
    return GradCheckReport(checks, tol)
