"""A small reverse-mode automatic differentiation engine on top of numpy.

Operations record themselves on execution (a dynamic tape).  Every recorded
node carries a global sequence number, so :func:`backward` can replay the
reachable part of the tape in exact reverse execution order.

Backward contract: a graph can be differentiated once.  ``backward`` releases
the recorded closures as it goes, and a second call on the same graph raises
:class:`~sctd.errors.GraphError`.  Re-run the forward pass to differentiate
again.  Leaf gradients accumulate across graphs (call :meth:`Tensor.zero_grad`
between optimizer steps).

Floating point overflow, invalid operations and division by zero inside any
documented operation raise :class:`~sctd.errors.NumericError` instead of
silently producing ``inf``/``nan``.  Underflow to zero is allowed (masked
attention logits rely on it).
"""

from __future__ import annotations

import contextlib
import functools
import itertools
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, GraphError, NumericError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "index_select",
    "embedding",
    "batch_gather",
    "scatter_rows",
    "concat",
    "exp",
    "log",
    "square",
    "clamp_min",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "pick",
]

_seq = itertools.count()
_grad_enabled = True


def _fp_guard():
    return np.errstate(over="raise", invalid="raise", divide="raise")


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("seq", "parents", "backward_fn", "consumed", "name")

    def __init__(self, name, parents, backward_fn):
        self.seq = next(_seq)
        self.name = name
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """Dense array with an optional gradient, a node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._node: Optional[_Node] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._node = None
        out.name = None
        return out

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


# ---------------------------------------------------------------------------
# graph plumbing
# ---------------------------------------------------------------------------


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(name, data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = rg
    out._node = _Node(name, tuple(parents), backward_fn) if rg else None
    return out


def _op(fn):
    """Run an op under the floating point guard and name its failures."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            with _fp_guard():
                return fn(*args, **kwargs)
        except FloatingPointError as exc:
            if isinstance(exc, NumericError):
                raise
            raise NumericError(f"{fn.__name__}: {exc}") from exc

    return wrapper


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        _accumulate_leaf(loss, seed)
        return
    if loss._node.consumed:
        raise GraphError("graph already differentiated; run the forward pass again")

    nodes = []
    seen = set()
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        if node.consumed:
            raise GraphError("graph shares nodes with an already differentiated graph")
        seen.add(id(node))
        nodes.append(node)
        for p in node.parents:
            if p.requires_grad and p._node is not None and id(p._node) not in seen:
                stack.append(p._node)
    nodes.sort(key=lambda n: n.seq, reverse=True)

    grads = {id(loss._node): seed}
    with _fp_guard():
        for node in nodes:
            g = grads.pop(id(node), None)
            fn = node.backward_fn
            node.backward_fn = None
            node.consumed = True
            if g is None:
                continue
            try:
                pgrads = fn(g)
            except FloatingPointError as exc:
                raise NumericError(f"backward of {node.name}: {exc}") from exc
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    _accumulate_leaf(p, pg)
                else:
                    key = id(p._node)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


@_op
def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return _result("add", a.data + b.data, (a, b), bw)


@_op
def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(-g, sb) if b.requires_grad else None,
        )

    return _result("sub", a.data - b.data, (a, b), bw)


@_op
def mul(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result("mul", ad * bd, (a, b), bw)


@_op
def div(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result("div", out, (a, b), bw)


@_op
def neg(a: Tensor) -> Tensor:
    return _result("neg", -a.data, (a,), lambda g: (-g,))


@_op
def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


@_op
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result("exp", out, (a,), lambda g: (g * out,))


@_op
def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result("log", np.log(ad), (a,), lambda g: (g / ad,))


@_op
def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result("square", ad * ad, (a,), lambda g: (2 * g * ad,))


@_op
def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; the gradient is blocked where the clamp is active."""
    ad = a.data
    keep = ad >= lo
    out = np.where(keep, ad, ad.dtype.type(lo))
    return _result("clamp_min", out, (a,), lambda g: (g * keep,))


_BLOCK = 16384  # elements per chunk; keeps elementwise temporaries cache-resident


def _blocks(size: int):
    for i in range(0, size, _BLOCK):
        yield slice(i, min(i + _BLOCK, size))


@_op
def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of the Gaussian error linear unit."""
    x = np.ascontiguousarray(a.data)
    t = x.dtype.type
    c, k, half, one = t(np.sqrt(2.0 / np.pi)), t(0.044715), t(0.5), t(1.0)
    flat = x.reshape(-1)
    th = np.empty_like(flat)
    out = np.empty_like(flat)
    for sl in _blocks(flat.size):
        xs, ts = flat[sl], th[sl]
        np.multiply(xs, xs, out=ts)
        ts *= xs
        ts *= k
        ts += xs
        ts *= c
        np.tanh(ts, out=ts)
        o = out[sl]
        np.add(ts, one, out=o)
        o *= xs
        o *= half

    def bw(g):
        gf = np.ascontiguousarray(g).reshape(-1)
        grad = np.empty_like(flat)
        tmp = np.empty(min(_BLOCK, flat.size), dtype=flat.dtype)
        for sl in _blocks(flat.size):
            xs, ts, r = flat[sl], th[sl], grad[sl]
            w = tmp[: xs.size]
            # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3k x^2)
            np.multiply(xs, xs, out=w)
            w *= 3.0 * k
            w += one
            w *= c
            w *= xs
            np.multiply(ts, ts, out=r)
            np.subtract(one, r, out=r)
            r *= w
            r += ts
            r += one
            r *= half
            r *= gf[sl]
        return (grad.reshape(x.shape),)

    return _result("gelu", out.reshape(x.shape), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------


@_op
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), bw)


@_op
def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` for 2-D ``x``; fused so the bias add happens in place."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out += b.data

    def bw(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return _result("linear", out, parents, bw)


@_op
def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


@_op
def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[i] for i in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _result("mean", np.mean(a.data, axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------


@_op
def reshape(a: Tensor, shape) -> Tensor:
    shape0 = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(shape0),))


@_op
def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in items)


@_op
def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result("getitem", a.data[idx], (a,), bw)


@_op
def index_select(a: Tensor, index) -> Tensor:
    """Rows ``a[index]`` along axis 0; ``index`` may repeat."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[0]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ContractError(f"index_select: index out of range for axis of size {n}")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (out,)

    return _result("index_select", a.data[index], (a,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Look up rows of ``weight`` for an integer id array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ContractError(f"embedding: ids must lie in [0, {weight.shape[0]})")
    return index_select(weight, ids)


@_op
def batch_gather(a: Tensor, index) -> Tensor:
    """Per-row gather: ``out[b, j] = a[b, index[b, j]]`` for ``a`` of shape [B, s, ...].

    Indices must be unique within each row (the backward pass scatters by
    assignment).
    """
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise DimensionError(f"batch_gather: index {index.shape} does not match tensor {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise ContractError(f"batch_gather: index out of range for length {a.shape[1]}")
    rows = np.arange(a.shape[0])[:, None]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[rows, index] = g
        return (out,)

    return _result("batch_gather", a.data[rows, index], (a,), bw)


@_op
def scatter_rows(base: Tensor, src: Tensor, index, valid) -> Tensor:
    """Copy of ``base`` with ``base[b, index[b, j]] = src[b, j]`` wherever ``valid[b, j]``."""
    index = np.asarray(index, dtype=np.intp)
    valid = np.asarray(valid, dtype=bool)
    if src.shape[:2] != index.shape or index.shape != valid.shape or base.shape[0] != src.shape[0]:
        raise DimensionError(
            f"scatter_rows: base {base.shape}, src {src.shape}, index {index.shape}, valid {valid.shape}"
        )
    if base.shape[2:] != src.shape[2:]:
        raise DimensionError(f"scatter_rows: row shapes differ, {base.shape} vs {src.shape}")
    b_idx, j_idx = np.nonzero(valid)
    pos = index[b_idx, j_idx]
    if pos.size and (pos.min() < 0 or pos.max() >= base.shape[1]):
        raise ContractError("scatter_rows: index out of range")
    out = base.data.copy()
    out[b_idx, pos] = src.data[b_idx, j_idx]

    def bw(g):
        gb = gs = None
        if base.requires_grad:
            gb = g.copy()
            gb[b_idx, pos] = 0
        if src.requires_grad:
            gs = np.zeros(src.shape, dtype=src.dtype)
            gs[b_idx, j_idx] = g[b_idx, pos]
        return gb, gs

    return _result("scatter_rows", out, (base, src), bw)


@_op
def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


@_op
def pick(a: Tensor, labels) -> Tensor:
    """``out[i] = a[i, labels[i]]`` for a 2-D ``a``."""
    labels = np.asarray(labels, dtype=np.intp)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise DimensionError(f"pick: logits {a.shape} vs labels {labels.shape}")
    rows = np.arange(a.shape[0])
    shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[rows, labels] = g
        return (out,)

    return _result("pick", a.data[rows, labels], (a,), bw)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def _check_axis(a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def _row_blocks(rows: int, width: int):
    step = max(1, _BLOCK // max(width, 1))
    for i in range(0, rows, step):
        yield slice(i, min(i + step, rows))


@_op
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    if axis != a.ndim - 1:
        out = a.data - a.data.max(axis=axis, keepdims=True)
        np.exp(out, out=out)
        out /= out.sum(axis=axis, keepdims=True)

        def bw(g):
            gy = g * out
            gy -= out * gy.sum(axis=axis, keepdims=True)
            return (gy,)

        return _result("softmax", out, (a,), bw)

    w = a.shape[-1]
    src = a.data.reshape(-1, w)
    out = np.empty(src.shape, dtype=src.dtype)
    for sl in _row_blocks(src.shape[0], w):
        o = out[sl]
        np.subtract(src[sl], src[sl].max(axis=1, keepdims=True), out=o)
        np.exp(o, out=o)
        o /= o.sum(axis=1, keepdims=True)

    def bw_rows(g):
        g2 = g.reshape(-1, w)
        gy = np.empty_like(out)
        for sl in _row_blocks(out.shape[0], w):
            r, o = gy[sl], out[sl]
            np.multiply(g2[sl], o, out=r)
            s_ = r.sum(axis=1, keepdims=True)
            r -= o * s_
        return (gy.reshape(a.shape),)

    return _result("softmax", out.reshape(a.shape), (a,), bw_rows)


@_op
def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (a,), bw)


@_op
def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    if not eps > 0:
        raise ContractError("layer_norm: eps must be positive")
    xd = x.data.reshape(-1, d)
    rows = xd.shape[0]
    e = xd.dtype.type(eps)
    gd, bd = gain.data, bias.data
    xhat = np.empty(xd.shape, dtype=xd.dtype)
    inv = np.empty((rows, 1), dtype=xd.dtype)
    out = np.empty(xd.shape, dtype=xd.dtype)
    for sl in _row_blocks(rows, d):
        xc = xhat[sl]
        np.subtract(xd[sl], xd[sl].mean(axis=1, keepdims=True), out=xc)
        var = (xc * xc).mean(axis=1, keepdims=True)
        iv = inv[sl]
        np.sqrt(var + e, out=iv)
        np.divide(1.0, iv, out=iv)
        xc *= iv
        o = out[sl]
        np.multiply(xc, gd, out=o)
        o += bd

    def bw(g):
        g2 = g.reshape(-1, d)
        gx = np.empty_like(xhat) if x.requires_grad else None
        ggain = np.zeros(d, dtype=xhat.dtype)
        for sl in _row_blocks(rows, d):
            gs, xh = g2[sl], xhat[sl]
            if gain.requires_grad:
                ggain += (gs * xh).sum(axis=0)
            if gx is not None:
                r = gx[sl]
                np.multiply(gs, gd, out=r)
                m1 = r.mean(axis=1, keepdims=True)
                m2 = (r * xh).mean(axis=1, keepdims=True)
                r -= m1
                r -= xh * m2
                r *= inv[sl]
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return (
            gx.reshape(x.shape) if gx is not None else None,
            ggain if gain.requires_grad else None,
            gbias,
        )

    return _result("layer_norm", out.reshape(x.shape), (x, gain, bias), bw)


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))
