"""Dense tensors with tape-free reverse-mode autodiff on top of numpy.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``backward`` sorts the reachable graph
topologically and runs the closures once each, accumulating into the ``grad``
slot of leaves that require gradients.

Only the handful of ops the looped backbone needs are provided. Storage is
row-major numpy; the dtype of an op's result follows its inputs, so a model
built in float64 stays in float64 end to end.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

RMS_EPS = 1e-6

_grad_enabled = True


class DegenerateRowError(ValueError):
    """A softmax row had every entry masked out."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (evaluation, decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # ---- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def relu_squared(x: Tensor) -> Tensor:
    """max(x, 0)**2, derivative 2*max(x, 0)."""
    r = np.maximum(x.data, 0)

    def bw(g):
        out = r * g
        out *= 2
        return (out,)

    return _make(np.square(r), (x,), bw, "relu_squared")


def softcap(x: Tensor, cap: float) -> Tensor:
    """cap * tanh(x / cap)."""
    t = np.tanh(x.data / cap)

    def bw(g):
        return (g * (1 - t * t),)

    return _make(cap * t, (x,), bw, "softcap")


# ---- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics.

    When ``b`` is 2-D the leading dims of ``a`` are folded into one GEMM, which
    is what every linear layer hits.
    """
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make(out, (a, b), bw, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


# ---- shape ops ------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), bw, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), (x,), bw, "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape
    dt = x.dtype

    def bw(g):
        full = np.zeros(src, dtype=dt)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# ---- normalisation / attention kernels ------------------------------------

def rms_normalize(x: Tensor, eps: float = RMS_EPS) -> Tensor:
    """x / sqrt(mean(x**2) + eps) over the last axis; no learnable scale."""
    xd = x.data
    d = xd.shape[-1]
    r = np.sqrt(np.einsum("...i,...i->...", xd, xd)[..., None] / d + eps)
    y = xd / r

    def bw(g):
        c = np.einsum("...i,...i->...", g, y)[..., None] / d
        return ((g - y * c) / r,)

    return _make(y, (x,), bw, "rms_normalize")


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (True = keep) broadcasts to ``x``.

    Masked entries come out as exact zeros.
    """
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.any(np.broadcast_to(mask, xd.shape), axis=-1)):
            raise DegenerateRowError("softmax row has no unmasked entries")
        xd = np.where(mask, xd, -np.inf)
    m = np.max(xd, axis=-1, keepdims=True)
    e = np.exp(xd - m)
    p = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - np.sum(g * p, axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (first half, second half) channel pairs by per-position angles.

    ``cos``/``sin`` have shape (T, d_h/2) and broadcast over leading dims.
    """
    d = x.shape[-1] // 2
    x1, x2 = x.data[..., :d], x.data[..., d:]
    out = np.empty_like(x.data)
    np.multiply(x1, cos, out=out[..., :d])
    out[..., :d] += x2 * sin
    np.multiply(x2, cos, out=out[..., d:])
    out[..., d:] -= x1 * sin

    def bw(g):
        g1, g2 = g[..., :d], g[..., d:]
        gx = np.empty_like(g)
        np.multiply(g1, cos, out=gx[..., :d])
        gx[..., :d] -= g2 * sin
        np.multiply(g1, sin, out=gx[..., d:])
        gx[..., d:] += g2 * cos
        return (gx,)

    return _make(out, (x,), bw, "rope")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape
    dt = table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), bw, "embedding")


def cross_entropy_rowwise(logits: Tensor, targets, ignore_index: int = -1):
    """Mean next-token NLL in nats over rows whose target != ignore_index.

    Returns ``(mean_loss, per_row)``; ``per_row`` is a numpy array with NaN
    marking ignored rows.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"cross_entropy_rowwise expects (n, V) logits, got {ld.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, V = ld.shape
    if targets.shape[0] != n:
        raise ValueError(f"{n} logit rows but {targets.shape[0]} targets")
    keep = targets != ignore_index
    bad = keep & ((targets < 0) | (targets >= V))
    if np.any(bad):
        raise IndexError(f"target {targets[bad][0]} outside [0, {V})")
    m = ld.max(axis=1, keepdims=True)
    shifted = ld - m
    lse = np.log(np.exp(shifted).sum(axis=1))
    safe_t = np.where(keep, targets, 0)
    nll = lse - shifted[np.arange(n), safe_t]
    count = int(keep.sum())
    per_row = np.where(keep, nll, np.nan)
    total = nll[keep].sum() if count else 0.0
    mean_val = np.asarray(total / count if count else np.nan, dtype=ld.dtype)

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), safe_t] -= 1.0
        p *= (keep / max(count, 1))[:, None]
        return (p * g,)

    return _make(mean_val, (logits,), bw, "cross_entropy"), per_row


# ---- backward -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
    return order


def backward(root: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``root``.

    Leaf gradients accumulate across calls; the graph is released afterwards.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not depend on any tensor requiring grad")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + gp
            else:
                grads[k] = gp
        node._parents = ()
        node._backward = None
