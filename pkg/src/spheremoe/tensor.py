"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires a gradient the
result remembers its parents and a closure that maps the output gradient to
input gradients; :func:`backward` replays those closures in reverse
topological order. Storage is a numpy array; numpy does the arithmetic and
this module does the bookkeeping.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, reused graph, ...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    @staticmethod
    def _wrap(data: np.ndarray, requires_grad: bool) -> Tensor:
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "leaf"
        t._consumed = False
        t.name = None
        return t

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


class no_grad:
    """Context manager that stops ops from recording the graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    need = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, need)
    out._op = op
    if need:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def graph(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor upstream of ``loss`` that requires one."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from every parameter (nothing requires grad)")
    if loss._consumed:
        raise GraphError("backward already ran on this graph; rebuild it with a new forward pass")
    loss._consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * out / b.data)

    return _make(out, (a, b), bw, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: _accum(x, g * c), "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * out), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)  # non-finite results are rejected by _make
    return _make(out, (x,), lambda g: _accum(x, g / x.data), "log")


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: _accum(x, 2.0 * g * x.data), "square")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: _accum(x, 0.5 * g / out), "sqrt")


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: _accum(x, g * on), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v**3))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * v * dt))

    return _make(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    v = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: _accum(x, g * out * (1.0 - out)), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * (1.0 - out * out)), "tanh")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading (batch) dimensions must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: _accum(x, np.transpose(g, inv)), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: _accum(x, g.reshape(src)), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        for x, part in zip(xs, np.split(g, cuts, axis=axis)):
            _accum(x, part)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, bw, "concat")


def index_select(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.intp)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"index out of range for axis of size {n}")

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, (slice(None),) * axis + (idx,), g)
        _accum(x, full)

    return _make(np.take(x.data, idx, axis=axis), (x,), bw, "index_select")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id outside [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accum(weight, full)

    return _make(weight.data[ids], (weight,), bw, "embedding")


def pick(x: Tensor, cols) -> Tensor:
    """``out[t] = x[t, cols[t]]`` for a 2-D ``x``."""
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(x.shape[0])

    def bw(g):
        full = np.zeros_like(x.data)
        full[rows, cols] = g
        _accum(x, full)

    return _make(x.data[rows, cols], (x,), bw, "pick")


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, shape))

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def argmax(x, axis: int = -1) -> np.ndarray:
    """Forward-only argmax; ties resolve to the lowest index."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return np.argmax(data, axis=axis)


# ---------------------------------------------------------------------------
# normalisations


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=dim, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=dim, keepdims=True)

    def bw(g):
        _accum(x, out * (g - (g * out).sum(axis=dim, keepdims=True)))

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=dim, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=dim, keepdims=True))

    def bw(g):
        _accum(x, g - np.exp(out) * g.sum(axis=dim, keepdims=True))

    return _make(out, (x,), bw, "log_softmax")


def l2_normalize(x: Tensor, dim: int = -1, eps: float = 1e-12) -> Tensor:
    """``x / max(||x||, eps)`` along ``dim``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((x.data * x.data).sum(axis=dim, keepdims=True))
    big = norm >= eps
    denom = np.where(big, norm, eps)
    out = x.data / denom

    def bw(g):
        proj = (out * g).sum(axis=dim, keepdims=True)
        _accum(x, np.where(big, (g - out * proj) / denom, g / eps))

    return _make(out, (x,), bw, "l2_normalize")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, v.shape[-1]).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, v.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            _accum(
                x,
                inv
                * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)),
            )

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def dropout(x: Tensor, rate: float, rng: "Rng | None") -> Tensor:
    """Inverted dropout. ``rng=None`` or ``rate=0`` is the identity."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: _accum(x, g * keep), "dropout")


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over rows where ``mask`` is set."""
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    T, V = logits.shape
    if targets.shape[0] != T:
        raise ShapeError(f"{T} logit rows but {targets.shape[0]} targets")
    rows = np.flatnonzero(np.ones(T, bool) if mask is None else np.asarray(mask, bool).reshape(-1))
    if rows.size == 0:
        raise ValueError("no supervised positions")
    tgt = targets[rows]
    if tgt.min() < 0 or tgt.max() >= V:
        raise IndexError(f"target outside [0, {V})")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(rows.size), tgt])

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(rows.size), tgt] -= 1.0
        full = np.zeros_like(logits.data)
        full[rows] = p * (float(g) / rows.size)
        _accum(logits, full)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_entries(f: Callable[[Tensor], Tensor | float], x: Tensor, indices, h: float = 1e-5) -> np.ndarray:
    """Central-difference partial derivatives at the given flat indices of ``x``.

    ``x.data`` is perturbed in place and restored, so ``f`` may close over ``x``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")

    def value() -> float:
        out = f(x)
        return out.item() if isinstance(out, Tensor) else float(out)

    flat = x.data.reshape(-1)
    if not np.shares_memory(flat, x.data):
        raise ValueError("finite differences need contiguous tensor storage")
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        up = value()
        flat[i] = orig - h
        down = value()
        flat[i] = orig
        out[n] = (up - down) / (2.0 * h)
    return out


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    return Tensor(finite_diff_entries(f, x, np.arange(x.data.size), h).reshape(x.shape))


def rel_error(a, b) -> float:
    """Norm-wise relative difference; 0 when both are zero."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=DTYPE)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=DTYPE)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0.0 else float(np.linalg.norm(a - b) / denom)


# ---------------------------------------------------------------------------
# random streams


def _label_words(label) -> tuple[int, ...]:
    digest = hashlib.blake2b(repr(label).encode("utf-8"), digest_size=8).digest()
    return (int.from_bytes(digest[:4], "little"), int.from_bytes(digest[4:], "little"))


class Rng:
    """Seeded PCG64 stream with labelled child streams.

    ``Rng(s).child("a", 3)`` depends only on the seed and the label path, never
    on how many draws were taken from the parent or from sibling streams.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        key: tuple[int, ...] = ()
        for label in self.path:
            key += _label_words(label)
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *labels) -> Rng:
        return Rng(self.seed, self.path + tuple(labels))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "path": list(self.path), "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> Rng:
        rng = cls(state["seed"], tuple(state["path"]))
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng
