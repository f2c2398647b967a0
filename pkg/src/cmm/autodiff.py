"""Dense tensors over numpy with a single reverse-mode tape.

Storage follows the dtype of the data (float32 for training, float64 for
gradient checks). Reductions accumulate in float64 and cast back.

Operations executed while a :class:`Tape` is active and with at least one
input that requires grad are recorded on that tape.  Everything else runs
eagerly with no bookkeeping, which is how ``no_grad`` regions work.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericFailure",
    "Tensor",
    "Tape",
    "no_grad",
    "tensor",
    "detach",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "silu",
    "relu",
    "sigmoid",
    "softplus",
    "unary",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "matmul",
    "linear",
    "rms_norm",
    "eval_and_backward",
    "finite_diff_check",
]


class NumericFailure(ArithmeticError):
    """A NaN or Inf appeared in the forward value or adjoint of an operation."""

    def __init__(self, op: str, phase: str = "forward"):
        super().__init__(f"non-finite value in {phase} of '{op}'")
        self.op = op
        self.phase = phase


def _check(op: str, arr: np.ndarray, phase: str = "forward") -> None:
    # summing first is cheap; only fall back to the elementwise scan when the
    # sum itself is non-finite (overflow of the sum alone is not a failure)
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.sum(arr)
    if not np.isfinite(s) and not np.isfinite(arr).all():
        raise NumericFailure(op, phase)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# tape


@dataclass
class _Node:
    op: str
    parents: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray, tuple[bool, ...]], Sequence[np.ndarray | None]]


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []
        self.recording = True
        # finite-difference replay of detached values, see finite_diff_check
        self.detach_log: list[np.ndarray] | None = None
        self.detach_replay: list[np.ndarray] | None = None
        self.detach_pos = 0


_state = _State()


class Tape:
    """Ordered record of executed operations.

    Used as a context manager; nesting pushes a new tape.  Adjoints are
    replayed in strict reverse execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.tapes.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def _sweep(self, output: Tensor, seed: np.ndarray, live: set[int] | None):
        adj: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = adj.get(id(node.out))
            if g is None:
                continue
            need = tuple(
                p.requires_grad and (live is None or id(p) in live) for p in node.parents
            )
            if not any(need):
                continue
            grads = node.backward(g, need)
            for p, n, gp in zip(node.parents, need, grads):
                if not n or gp is None:
                    continue
                _check(node.op, gp, "backward")
                k = id(p)
                prev = adj.get(k)
                adj[k] = gp if prev is None else prev + gp
        return adj

    def gradients(self, output: Tensor, wrt: Sequence[Tensor], seed: np.ndarray | None = None) -> list[np.ndarray]:
        """Adjoints of ``sum(output)`` (or ``<seed, output>``) w.r.t. ``wrt``.

        Only nodes lying on a path from ``wrt`` to ``output`` are visited, and
        nothing is written to ``.grad``.
        """
        live = {id(t) for t in wrt}
        for node in self.nodes:
            if any(id(p) in live for p in node.parents):
                live.add(id(node.out))
        if seed is None:
            seed = np.ones_like(output.data)
        adj = self._sweep(output, seed, live)
        return [adj.get(id(t), np.zeros_like(t.data)) for t in wrt]

    def backward(self, output: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate d sum(output) / d leaf into ``leaf.grad`` for every leaf."""
        if seed is None:
            seed = np.ones_like(output.data)
        adj = self._sweep(output, seed, None)
        produced = {id(n.out) for n in self.nodes}
        seen: set[int] = set()
        for node in self.nodes:
            for p in node.parents:
                k = id(p)
                if k in seen or k in produced or not p.requires_grad:
                    continue
                seen.add(k)
                g = adj.get(k)
                if g is None:
                    continue
                p.grad = g.astype(p.data.dtype, copy=True) if p.grad is None else p.grad + g


@contextlib.contextmanager
def no_grad():
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


def _tape() -> Tape | None:
    if not _state.recording or not _state.tapes:
        return None
    return _state.tapes[-1]


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor._wrap(np.asarray(x, dtype=dtype), False)


def _emit(op: str, out: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check(op, out)
    tape = _tape()
    rg = tape is not None and any(p.requires_grad for p in parents)
    t = Tensor._wrap(out, rg)
    if rg:
        tape.nodes.append(_Node(op, parents, t, backward))
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)), dtype=np.float64).astype(g.dtype)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# detach


def detach(x: Tensor) -> Tensor:
    """Cut ``x`` out of the graph.

    During a finite-difference check the value seen at the base point is
    replayed instead, so perturbations only travel along live paths.
    """
    st = _state
    if st.detach_replay is not None:
        arr = st.detach_replay[st.detach_pos]
        st.detach_pos += 1
        return Tensor._wrap(arr, False)
    if st.detach_log is not None:
        st.detach_log.append(x.data.copy())
    return Tensor._wrap(x.data, False)


# ---------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(g, sb) if need[1] else None)

    return _emit("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        return (_unbroadcast(g, sa) if need[0] else None, _unbroadcast(-g, sb) if need[1] else None)

    return _emit("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)

    def bw(g, need):
        return (
            _unbroadcast(g * b.data, a.shape) if need[0] else None,
            _unbroadcast(g * a.data, b.shape) if need[1] else None,
        )

    return _emit("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g, need):
        return (
            _unbroadcast(g / b.data, a.shape) if need[0] else None,
            _unbroadcast(-g * out / b.data, b.shape) if need[1] else None,
        )

    return _emit("div", out, (a, b), bw)


# ---------------------------------------------------------------------------
# elementwise unary


def unary(op: str, x: Tensor, f: Callable, df: Callable) -> Tensor:
    """Generic elementwise primitive; ``df(x, y)`` returns dy/dx given input and output."""
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        y = f(x.data)

    def bw(g, need):
        return (g * df(x.data, y),)

    return _emit(op, y, (x,), bw)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g, need: (-g,))


def square(x: Tensor) -> Tensor:
    return unary("square", x, np.square, lambda x, y: 2 * x)


def exp(x: Tensor) -> Tensor:
    return unary("exp", x, np.exp, lambda x, y: y)


def log(x: Tensor) -> Tensor:
    return unary("log", x, np.log, lambda x, y: 1 / x)


def sqrt(x: Tensor) -> Tensor:
    return unary("sqrt", x, np.sqrt, lambda x, y: 0.5 / y)


def tanh(x: Tensor) -> Tensor:
    return unary("tanh", x, np.tanh, lambda x, y: 1 - y * y)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of -|x| never overflows
    e = np.exp(-np.abs(x))
    r = 1 / (1 + e)
    return np.where(x >= 0, r, e * r)


def sigmoid(x: Tensor) -> Tensor:
    return unary("sigmoid", x, _sigmoid, lambda x, y: y * (1 - y))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    y = x.data * s

    def bw(g, need):
        return (g * (s * (1 + x.data * (1 - s))),)

    return _emit("silu", y, (x,), bw)


def relu(x: Tensor) -> Tensor:
    return unary("relu", x, lambda v: np.maximum(v, 0), lambda x, y: (x > 0).astype(x.dtype))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x) in the overflow-free form max(x, 0) + log1p(e^-|x|)."""
    return unary(
        "softplus",
        x,
        lambda v: np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v))),
        lambda x, y: _sigmoid(x),
    )


# ---------------------------------------------------------------------------
# reductions and shape


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def bw(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)
    shape = x.shape

    def bw(g, need):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).astype(x.dtype),)

    return _emit("mean", np.asarray(out), (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g, need: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g, need: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g, need):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", np.concatenate([t.data for t in xs], axis=axis), xs, bw)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather ``table[idx]`` (embedding lookup); adjoint scatter-adds rows."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g, need):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return _emit("take_rows", table.data[idx], (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a, b)
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands with ndim >= 2")

    def bw(g, need):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if need[0] else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if need[1] else None
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``, flattened to one GEMM."""
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g, need):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if need[0] else None
        gw = x2.T @ g2 if need[1] else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype) if need[2] else None
        return gx, gw, gb

    return _emit("linear", out.reshape(*lead, w.shape[-1]), parents, bw)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, normalized over the last axis."""
    d = x.shape[-1]
    ms = np.mean(np.square(x.data, dtype=np.float64), axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(ms + eps)).astype(x.dtype)
    xh = x.data * inv
    out = xh * gain.data

    def bw(g, need):
        gx = ggain = None
        if need[1]:
            ggain = (g * xh).reshape(-1, d).sum(axis=0, dtype=np.float64).astype(g.dtype)
        if need[0]:
            gh = g * gain.data
            dot = np.mean(gh * xh, axis=-1, keepdims=True, dtype=np.float64).astype(g.dtype)
            gx = inv * (gh - xh * dot)
        return gx, ggain

    return _emit("rms_norm", out, (x, gain), bw)


# ---------------------------------------------------------------------------
# drivers


def eval_and_backward(f: Callable[..., Tensor], inputs: Sequence[Tensor]) -> tuple[Tensor, list[np.ndarray]]:
    """Evaluate ``f(*inputs)`` and return ``d sum(value) / d inputs``.

    Inputs that do not require grad (detached) receive zero gradients.
    """
    with Tape() as tape:
        value = f(*inputs)
    live = [t for t in inputs if t.requires_grad]
    grads = tape.gradients(value, live) if live else []
    it = iter(grads)
    out = [next(it) if t.requires_grad else np.zeros_like(t.data) for t in inputs]
    return value, out


def finite_diff_check(
    f: Callable[[], Tensor],
    x: Tensor,
    h: float = 1e-3,
    coords: np.ndarray | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` takes no arguments and closes over ``x`` (mutated in place for the
    perturbations) so that any tensor of a model can be checked.  Values that
    pass through :func:`detach` are frozen at the base point, which makes the
    comparison cover live paths only.  ``coords`` optionally restricts the
    check to a subset of flat indices.
    """
    st = _state
    log: list[np.ndarray] = []
    st.detach_log = log
    try:
        with Tape() as tape:
            value = f()
        (analytic,) = tape.gradients(value, [x])
    finally:
        st.detach_log = None

    flat = x.data.reshape(-1)
    analytic = analytic.reshape(-1).astype(np.float64)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords)
    worst = 0.0
    st.detach_replay = log
    try:
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                st.detach_pos = 0
                fp = float(np.sum(f().data, dtype=np.float64))
                flat[i] = orig - h
                st.detach_pos = 0
                fm = float(np.sum(f().data, dtype=np.float64))
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(analytic[i] - num) / max(1.0, abs(analytic[i]))
                worst = max(worst, err)
    finally:
        st.detach_replay = None
        st.detach_pos = 0
    return worst
