"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of primitives needed by the transducer, the biasing
adapters and the sequence losses are provided. Shapes are always explicit:
there is no implicit broadcasting apart from multiplying by a Python scalar.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """An operation received non-finite input."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense row-major float64 array that may take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _check_finite(a: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{op}: non-finite input")


class GradTape:
    """Reverse topological ordering of the graph under a scalar root.

    Creation order of nodes is a valid topological order, but the graph is
    rediscovered from the root so only ancestors that need gradients are
    visited, each exactly once.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order[::-1]

    def replay(self, seed: np.ndarray) -> None:
        root = self.nodes[0]
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in self.nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _accum(node, g)
                continue
            # interior nodes route their gradient to parents through a scratch dict
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable ancestor."""
    if root.data.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    GradTape(root).replay(np.ones_like(root.data))


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return ((a, g @ B.T if a.requires_grad else None), (b, A.T @ g if b.requires_grad else None))

    return _make(A @ B, (a, b), bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w`` plus the row vector ``b`` (shape 1×n) added to every row."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"affine: incompatible shapes {x.shape} and {w.shape}")
    if b.shape != (1, w.shape[1]):
        raise DimensionError(f"affine: bias shape {b.shape} does not match (1, {w.shape[1]})")
    X, W = x.data, w.data

    def bw(g):
        return (
            (x, g @ W.T if x.requires_grad else None),
            (w, X.T @ g if w.requires_grad else None),
            (b, g.sum(axis=0, keepdims=True)),
        )

    return _make(X @ W + b.data, (x, w, b), bw)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: ((a, g), (b, g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: ((a, g * B), (b, g * A)))


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: ((a, g * c),))


def sigmoid(a: Tensor) -> Tensor:
    s = np.empty_like(a.data)
    pos = a.data >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    s[~pos] = e / (1.0 + e)
    return _make(s, (a,), lambda g: ((a, g * s * (1.0 - s)),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: ((a, g * (1.0 - t * t)),))


def nonlinearity(a: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown nonlinearity {kind!r}")


def log(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("log: negative input")
    # underflowed probabilities are floored instead of producing -inf
    A = np.maximum(a.data, 1e-300)
    return _make(np.log(A), (a,), lambda g: ((a, g / A),))


def softmax_rows(a: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``a / scale``."""
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise DimensionError(f"softmax_rows: need a non-empty matrix, got {a.shape}")
    if scale <= 0:
        raise ValueError("softmax_rows: scale must be positive")
    _check_finite(a.data, "softmax_rows")
    z = a.data / scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return ((a, p * (g - inner) / scale),)

    return _make(p, (a,), bw)


def log_softmax_rows(a: Tensor) -> Tensor:
    if a.data.ndim != 2 or a.shape[1] < 1:
        raise DimensionError(f"log_softmax_rows: need a non-empty matrix, got {a.shape}")
    _check_finite(a.data, "log_softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return ((a, g - p * g.sum(axis=1, keepdims=True)),)

    return _make(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: ((a, np.full(shape, float(g))),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return scale(sum_all(a), 1.0 / n)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose: need a matrix, got {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: ((a, g.T),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: ((a, g.reshape(old)),))


def take_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    """Gather rows ``a[index]``; repeated indices accumulate gradient."""
    idx = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_rows: index out of range for {n} rows")

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return ((a, out),)

    return _make(a.data[idx], (a,), bw)


def pick(a: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Vector of entries ``a[rows[i], cols[i]]``."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (r, c), g)
        return ((a, out),)

    return _make(a.data[r, c], (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise DimensionError(f"slice_cols: bad range [{start}, {stop}) for {a.shape}")

    def bw(g):
        out = np.zeros_like(a.data)
        out[:, start:stop] = g
        return ((a, out),)

    return _make(a.data[:, start:stop], (a,), bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise DimensionError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[1] for p in parts])

    def bw(g):
        return tuple((p, g[:, edges[i]:edges[i + 1]]) for i, p in enumerate(parts))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ {[p.shape for p in parts]}")
    edges = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple((p, g[edges[i]:edges[i + 1]]) for i, p in enumerate(parts))

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw)


def add_n(parts: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors."""
    if not parts:
        raise ValueError("add_n: empty input")
    for p in parts[1:]:
        _same_shape(parts[0], p, "add_n")
    data = parts[0].data.copy()
    for p in parts[1:]:
        data = data + p.data
    return _make(data, tuple(parts), lambda g: tuple((p, g) for p in parts))


def custom(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable[[np.ndarray], Iterable]) -> Tensor:
    """Register an op whose forward was computed elsewhere.

    ``vjp(g)`` must yield ``(input, grad)`` pairs.
    """
    return _make(np.asarray(data, dtype=np.float64), tuple(inputs), vjp)


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------


def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, name: str | None = None) -> Tensor:
    """Parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True, name=name)


class Adam:
    """Adam over a named parameter dict; frozen tensors are simply not passed in."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        factor = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values() if p.grad is not None))
            if total > self.clip_norm:
                factor = self.clip_norm / total
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad * factor
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
