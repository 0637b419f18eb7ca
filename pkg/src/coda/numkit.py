"""Dense 2-D tensors with a reverse-mode gradient tape.

Only the primitives the tokenizer stack needs are provided. Every op records
a node when any operand requires a gradient; ``backward`` replays the
recorded graph in reverse topological order and accumulates into leaves.

Values are float32 by default. ``precision(np.float64)`` switches the dtype
for a block, which the finite-difference checker uses so that the central
differences are not swamped by rounding.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

RMS_EPS = 1e-6
LN_EPS = 1e-6
_TINY = 1e-30
MAGIC = b"CODA1"


class ContractViolation(ValueError):
    """Raised when an operation's preconditions do not hold."""


_state = threading.local()


def _dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(dtype: type):
    """Temporarily change the dtype of newly created tensors on this thread."""
    prev = _dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on a tape."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    consumed: bool = False


class Tensor:
    """A dense array with an optional gradient slot.

    ``grad`` is created lazily by ``backward`` and has the same shape as
    ``data``. Tensors produced by ops carry a ``node`` linking them to their
    operands.
    """

    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_dtype(), copy=True)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ContractViolation("tensor values must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _out(data: np.ndarray) -> Tensor:
    # op outputs skip the finiteness scan on the hot path; backward never
    # produces non-finite values for the inputs the library feeds it
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(data, dtype=_dtype())
    t.grad = None
    t.requires_grad = False
    t.node = None
    t.name = None
    return t


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def record(op: str, data: np.ndarray, parents: Sequence[Tensor],
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and attach it to the tape.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    parent. Exposed so that callers can define ops such as straight-through
    routing without growing this module.
    """
    out = _out(data)
    if _grad_enabled() and any(_tracks(p) for p in parents):
        out.node = Node(op, tuple(parents), backward_fn)
    return out


def _check_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ContractViolation(f"{op} expects a 2-D tensor, got shape {t.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum(dtype=np.float64))
    if len(shape) == 1:
        return grad.sum(axis=0, dtype=np.float64)
    return grad.sum(axis=0, keepdims=True, dtype=np.float64)


def _row_broadcastable(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.data.ndim == 0:
        return
    if a.data.ndim == 2 and (b.shape == (a.shape[1],) or b.shape == (1, a.shape[1])):
        return
    raise ContractViolation(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_2d(a, "matmul")
    _check_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return record("matmul", ad @ bd, (a, b), bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _row_broadcastable(a, b, "add")
    sa, sb = a.shape, b.shape
    return record("add", a.data + b.data, (a, b),
                  lambda g: (g, _unbroadcast(g, sb)))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _row_broadcastable(a, b, "subtract")
    sb = b.shape
    return record("subtract", a.data - b.data, (a, b),
                  lambda g: (g, -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _row_broadcastable(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return record("mul", ad * bd, (a, b),
                  lambda g: (g * bd, _unbroadcast(g * ad, sb)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _check_2d(a, "transpose")
    return record("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from exc
    return record("reshape", data, (a,), lambda g: (g.reshape(old),))


def rowwise_rms_normalize(a, eps: float = RMS_EPS) -> Tensor:
    a = as_tensor(a)
    _check_2d(a, "rowwise_rms_normalize")
    x = a.data
    d = x.shape[1]
    ms = np.mean(x.astype(np.float64) ** 2, axis=1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
    y = x * inv

    def bw(g):
        dot = np.sum(g * x, axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (inv * (g - (inv * inv / d) * x * dot),)

    return record("rowwise_rms_normalize", y, (a,), bw)


def rowwise_layer_normalize(a, eps: float = LN_EPS) -> Tensor:
    a = as_tensor(a)
    _check_2d(a, "rowwise_layer_normalize")
    x = a.data
    d = x.shape[1]
    mu = np.mean(x, axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
    xc = x - mu
    var = np.mean(xc.astype(np.float64) ** 2, axis=1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    y = xc * inv

    def bw(g):
        gm = np.mean(g, axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
        gy = np.mean(g * y, axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (inv * (g - gm - y * gy),)

    return record("rowwise_layer_normalize", y, (a,), bw)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    _check_2d(a, "softmax_rows")
    if a.shape[1] == 0:
        raise ContractViolation("softmax over an empty row")
    p = _softmax(a.data)

    def bw(g):
        dot = np.sum(g * p, axis=1, keepdims=True, dtype=np.float64).astype(p.dtype)
        return (p * (g - dot),)

    return record("softmax_rows", p, (a,), bw)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    _check_2d(a, "log_softmax_rows")
    if a.shape[1] == 0:
        raise ContractViolation("softmax over an empty row")
    x = a.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype)
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * np.sum(g, axis=1, keepdims=True, dtype=np.float64).astype(p.dtype),)

    return record("log_softmax_rows", y, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ContractViolation("log of a non-positive value")
    x = a.data
    return record("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record("exp", y, (a,), lambda g: (g * y,))


def xlogx(a) -> Tensor:
    """Element-wise x*log(x) with 0*log(0) taken as 0."""
    a = as_tensor(a)
    x = a.data
    if np.any(x < 0):
        raise ContractViolation("xlogx of a negative value")
    safe = np.maximum(x, _TINY)
    y = np.where(x > 0, x * np.log(safe), 0.0)
    return record("xlogx", y, (a,), lambda g: (g * (np.log(safe) + 1.0),))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu_like_nonlinearity(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    s = sigmoid_np(x)
    return record("silu", x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


silu = relu_like_nonlinearity


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum all entries (scalar result) or along ``axis`` keeping a 2-D shape."""
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        y = np.sum(a.data, dtype=np.float64)
        return record("sum", y, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    _check_2d(a, "sum(axis)")
    y = np.sum(a.data, axis=axis, keepdims=True, dtype=np.float64)
    return record("sum", y, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise ContractViolation("mean of an empty tensor")
    return scale(sum(a, axis=axis), 1.0 / count)


def mean_squared_error(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mean_squared_error: shapes {a.shape} and {b.shape} differ")
    if a.size == 0:
        raise ContractViolation("mean_squared_error of empty tensors")
    diff = a.data.astype(np.float64) - b.data
    y = np.mean(diff * diff)
    k = 2.0 / a.size

    def bw(g):
        ga = (g * k * diff).astype(a.data.dtype)
        return ga, -ga

    return record("mean_squared_error", y, (a, b), bw)


def gather_rows(a, indices) -> Tensor:
    a = as_tensor(a)
    _check_2d(a, "gather_rows")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractViolation("gather_rows: index out of range")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return record("gather_rows", a.data[idx], (a,), bw)


def select_columns(a, columns) -> Tensor:
    """out[i] = a[i, columns[i]]; returns a length-m vector."""
    a = as_tensor(a)
    _check_2d(a, "select_columns")
    cols = np.asarray(columns, dtype=np.int64).reshape(-1)
    if cols.size != a.shape[0]:
        raise ContractViolation("select_columns: one column per row required")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ContractViolation("select_columns: column out of range")
    rows = np.arange(cols.size)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, cols] = g
        return (out,)

    return record("select_columns", a.data[rows, cols], (a,), bw)


def concat_rows(parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    for p in parts:
        _check_2d(p, "concat_rows")
    if len({p.shape[1] for p in parts}) != 1:
        raise ContractViolation("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return record("concat_rows", np.concatenate([p.data for p in parts], axis=0), parts, bw)


def one_hot_rows(indices, n: int) -> Tensor:
    """Constant m x n matrix with a single 1 per row."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractViolation("one_hot_rows: index out of range")
    out = np.zeros((idx.size, n), dtype=_dtype())
    out[np.arange(idx.size), idx] = 1.0
    return _out(out)


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return _out(a.data)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


@dataclass
class GradTape:
    """Nodes reachable from an output, ordered so that each node precedes
    all of its operands (reverse topological order)."""

    order: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen and _tracks(p):
                        stack.append((p, False))
        order.reverse()
        return cls(order)


def backward(output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every leaf with requires_grad."""
    if output.size != 1:
        raise ContractViolation(f"backward needs a scalar output, got shape {output.shape}")
    if output.node is None:
        raise ContractViolation("backward on a tensor that is not on a tape")
    tape = GradTape.from_output(output)
    for t in tape.order:
        if t.node is not None and t.node.consumed:
            raise ContractViolation("graph already consumed by an earlier backward call")
    grads: dict[int, np.ndarray] = {id(output): np.ones(output.shape, dtype=output.data.dtype)}
    for t in tape.order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not _tracks(p):
                continue
            pg = np.asarray(pg, dtype=p.data.dtype).reshape(p.shape)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g
        t.node.consumed = True


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def finite_difference_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central| / (|central| + 1e-8).

    Both routes run in float64.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractViolation("eps must lie in (0, 1e-2]")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        xt = Tensor(base, requires_grad=True)
        out = f(xt)
        if not isinstance(out, Tensor) or out.size != 1:
            raise ContractViolation("f must return a scalar tensor")
        if out.node is None:
            analytic = np.zeros_like(base)
        else:
            backward(out)
            analytic = np.zeros_like(base) if xt.grad is None else xt.grad.astype(np.float64)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(Tensor(base)).item()
                flat[i] = orig - eps
                lo = f(Tensor(base)).item()
                flat[i] = orig
                num_flat[i] = (hi - lo) / (2.0 * eps)
    if base.size == 0:
        return 0.0
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max())


# --------------------------------------------------------------------------
# named-tensor container
# --------------------------------------------------------------------------


def save_tensors(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write ``tensors`` in the CODA1 container (all integers u64 LE, values f32 LE)."""
    chunks = [MAGIC, struct.pack("<Q", len(tensors))]
    for name, value in tensors.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise ContractViolation(f"{path}: not a CODA1 container")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ContractViolation(f"{path}: truncated container")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    (count,) = take("<Q")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<Q")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<Q")
        shape = take(f"<{rank}Q") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        if pos + 4 * n > len(buf):
            raise ContractViolation(f"{path}: truncated container")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
        out[name] = arr.astype(np.float32)
    return out


def parameters_of(items: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in items if t.requires_grad]


def gaussian_init(shape: tuple[int, int], rng: np.random.Generator, fan_in: int | None = None) -> np.ndarray:
    """N(0, 1/fan_in) entries; fan_in defaults to the row count."""
    fan = fan_in if fan_in is not None else shape[0]
    return rng.normal(0.0, 1.0 / math.sqrt(fan), size=shape)
