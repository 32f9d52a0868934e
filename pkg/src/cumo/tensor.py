"""Eager reverse-mode autodiff over small dense float tensors.

Every op computes its result with numpy, records its operands and a backward
rule, and returns a new :class:`Tensor`. ``Tensor.backward`` walks the
reachable nodes in reverse creation order, so each node is visited once and
after every consumer of its output.

Parameters and activations are float32. Loss-style reductions (``sum``,
``mean`` to a scalar, ``cross_entropy``, ``logsumexp``) accumulate and return
float64. A float64 tensor stays float64 through every op, which is how the
gradient checks promote a whole model to 64-bit.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

MAX_RANK = 4
_ids = itertools.count()
_state = threading.local()

GELU_K = float(np.sqrt(2.0 / np.pi))
GELU_C = 0.044715


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_float(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 or arr.dtype == np.float32:
        return arr
    return arr.astype(np.float32)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = _as_float(data, dtype)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        if any(d <= 0 for d in arr.shape):
            raise DimensionError(f"non-positive extent in shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

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
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __deepcopy__(self, memo):
        # a copy is a new graph node; sharing _id would merge them in backward
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)
        memo[id(self)] = t
        return t

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate ``grad`` of every leaf reachable from this scalar.

        Gradients accumulate into existing buffers; call ``zero_grad`` to reset.
        """
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("root does not depend on any tensor requiring grad")
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad and p._id not in nodes)
        grads = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g.astype(node.data.dtype, copy=False)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = pg.astype(parent.data.dtype, copy=False)
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, (1, 0))


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.grad = None
    out._id = next(_ids)
    if data.ndim > MAX_RANK:
        raise DimensionError(f"{op} produced rank {data.ndim}")
    track = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ----------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _lift(b, a.dtype)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _node(out, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _node(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "mul")
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward, "mul")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(v * (GELU_K + (GELU_K * GELU_C) * v2))
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * (GELU_K + (3.0 * GELU_K * GELU_C) * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _node(out, (x,), backward, "gelu")


# shape ----------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: list[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _node(out, tuple(xs), backward, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start + length)`` along ``axis``."""
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _node(x.data[sl], (x,), backward, "narrow")


def take(x: Tensor, idx) -> Tensor:
    """Gather along the leading axis: ``x[idx]``. Backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(out, (x,), backward, "take")


def take_along_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row gather: ``out[n, i] = x[n, idx[n, i]]`` for 2-D ``x``."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.take_along_axis(x.data, idx, axis=1)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (np.arange(idx.shape[0])[:, None], idx), g)
        return (gx,)

    return _node(out, (x,), backward, "take_along_rows")


def index_add(n_rows: int, parts: list[tuple[np.ndarray, Tensor]], width: int, dtype=np.float32) -> Tensor:
    """Sum row blocks into an ``n_rows x width`` zero matrix.

    ``parts`` holds ``(rows, block)`` pairs; rows within one block must be
    unique. Blocks are added in list order.
    """
    out = np.zeros((n_rows, width), dtype=dtype)
    for rows, block in parts:
        out[rows] += block.data

    def backward(g):
        return tuple(g[rows] for rows, _ in parts)

    return _node(out, tuple(b for _, b in parts), backward, "index_add")


def pool_grid(x: Tensor, grid: int, factor: int) -> Tensor:
    """Average-pool a ``[B, (grid*factor)**2, C]`` token grid down to ``[B, grid**2, C]``."""
    b, t, c = x.shape
    side = grid * factor
    if t != side * side:
        raise DimensionError(f"{t} tokens do not form a {side}x{side} grid")
    v = x.data.reshape(b, grid, factor, grid, factor, c)
    out = v.mean(axis=(2, 4)).reshape(b, grid * grid, c).astype(x.dtype, copy=False)

    def backward(g):
        g6 = g.reshape(b, grid, 1, grid, 1, c) / (factor * factor)
        g6 = np.broadcast_to(g6, (b, grid, factor, grid, factor, c))
        return (g6.reshape(b, t, c),)

    return _node(out, (x,), backward, "pool_grid")


# linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across the leading axes of ``a``) or has the
    same leading axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # one flat GEMM is much faster than numpy's stacked loop
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _node(out, (a, b), backward, "matmul")

    out = a.data @ b.data

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(out, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# normalisation --------------------------------------------------------------

def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by the row max.

    ``mask`` (broadcastable boolean, True = keep) zeroes excluded entries;
    every row must keep at least one entry.
    """
    v = x.data if mask is None else np.where(mask, x.data, -np.inf)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    s = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = (e / s).astype(x.dtype, copy=False)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64)
        return ((y * (g - inner)).astype(x.dtype, copy=False),)

    return _node(y, (x,), backward, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    v = x.data
    # row statistics accumulate in float64; the wide arrays stay in x's dtype
    mu = v.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        gx = inv * (dxhat - m1 - xhat * m2)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), backward, "layernorm")


# reductions -----------------------------------------------------------------

def sum(x: Tensor) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(dtype=np.float64))
    return _node(out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all entries (float64 scalar) or over one axis (input dtype)."""
    if axis is None:
        n = x.data.size
        out = np.asarray(x.data.mean(dtype=np.float64))
        return _node(out, (x,), lambda g: (np.broadcast_to(g / n, x.shape).astype(x.dtype),), "mean")
    n = x.shape[axis]
    out = x.data.mean(axis=axis, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).astype(x.dtype),)

    return _node(out, (x,), backward, "mean")


def logsumexp(x: Tensor) -> Tensor:
    """Row-wise log-sum-exp over the last axis, computed and returned in float64."""
    v = x.data.astype(np.float64)
    m = v.max(axis=-1, keepdims=True)
    e = np.exp(v - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]

    def backward(g):
        return (g[..., None] * (e / s),)

    return _node(out, (x,), backward, "logsumexp")


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax.

    Rows where ``mask`` is False are excluded from the mean. Returns a float64
    scalar.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [N, V] logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise DimensionError(f"{t.shape[0]} targets for {n} rows")
    keep = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    if np.any((t[keep] < 0) | (t[keep] >= v)):
        raise IndexError(f"target outside [0, {v})")
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy over zero rows")
    t = np.where(keep, t, 0)
    z = logits.data.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(s))[:, 0]
    picked = z[np.arange(n), t]
    out = np.asarray(((lse - picked) * keep).sum() / count)

    def backward(g):
        p = e / s
        p[np.arange(n), t] -= 1.0
        p *= (keep / count)[:, None]
        return (p * g,)

    return _node(out, (logits,), backward, "cross_entropy")


def parameters_of(obj) -> list[Tensor]:
    """Deterministically ordered trainable tensors of a module tree."""
    return [t for _, t in named_tensors(obj)]


def named_tensors(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Walk attributes/lists of a module object collecting ``Tensor`` leaves by path."""
    out: list[tuple[str, Tensor]] = []
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.extend(named_tensors(item, f"{prefix}.{i}" if prefix else str(i)))
        return out
    fields = getattr(obj, "tensor_fields", None)
    if fields is None:
        return out
    for name in fields:
        child = getattr(obj, name)
        if child is None:
            continue
        out.extend(named_tensors(child, f"{prefix}.{name}" if prefix else name))
    return out
