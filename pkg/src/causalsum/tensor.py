"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`.  When any operand requires a
gradient the result records its parents and a closure mapping the output
gradient to one gradient per parent; :func:`backward` walks that graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateRowError, DomainError, GraphError, ShapeError

# per thread, so concurrent inference cannot switch recording off for a trainer
_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn", "_consumed")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), _grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._grad_fn: Callable | None = _grad_fn
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return swap_last(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), grad_fn)
    return Tensor(data)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` on every tensor reachable from ``loss`` that requires one.

    Gradients of reachable tensors are reset before filling.  A graph can be
    differentiated once; a second call on the same loss raises GraphError.
    """
    if loss.ndim != 0:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    for node in order:
        # drop closures so intermediate buffers can be collected
        node._grad_fn = None
        node._parents = ()
    loss._consumed = True


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a.shape, b.shape)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a.shape, b.shape)

    def grad_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a.shape, b.shape)
    out = a.data / b.data

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def negate(x) -> Tensor:
    x = _wrap(x)
    return _result(-x.data, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def _sigmoid(d: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -d))


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x) -> Tensor:
    x = _wrap(x)
    active = x.data > 0.0  # relu'(0) = 0
    return _result(np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


def exp(x) -> Tensor:
    x = _wrap(x)
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,))


def log(x) -> Tensor:
    x = _wrap(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = _wrap(x)
    r = np.sqrt(x.data)
    return _result(r, (x,), lambda g: (g * 0.5 / r,))


def softplus(x) -> Tensor:
    x = _wrap(x)
    return _result(np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid(x.data),))


def log_sigmoid(x) -> Tensor:
    x = _wrap(x)
    return _result(-np.logaddexp(0.0, -x.data), (x,), lambda g: (g * _sigmoid(-x.data),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping is active."""
    x = _wrap(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "negate": negate,
    "scale": scale,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softplus": softplus,
}


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch a pointwise operation by name."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise DomainError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), grad_fn)


def swap_last(x) -> Tensor:
    x = _wrap(x)
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, tuple(ts), grad_fn)


def index(x, key) -> Tensor:
    x = _wrap(x)
    out = x.data[key]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.array(out), (x,), grad_fn)


def take_rows(table, ids) -> Tensor:
    """Gather rows of a 2-D table; ``ids`` may have any integer shape."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.shape}")

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), grad_fn)


def pick(x, idx) -> Tensor:
    """out[..., ] = x[..., idx[...]] along the last axis."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} does not match {x.shape[:-1]}")
    gathered = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return _result(gathered, (x,), grad_fn)


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), grad_fn)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- normalisation


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis; ``-inf`` entries map to exactly 0."""
    x = _wrap(x)
    m = x.data.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateRowError("softmax row without any finite entry")
    e = np.exp(x.data - m)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), grad_fn)


def log_softmax_rows(x) -> Tensor:
    x = _wrap(x)
    m = x.data.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateRowError("log-softmax row without any finite entry")
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def grad_fn(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), grad_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.shape[-1] if x.ndim else 0
    if d < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    if eps <= 0:
        raise DomainError("layer_norm eps must be positive")
    centred = x.data - x.data.mean(axis=-1, keepdims=True)
    var = (centred**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        gx = gxh = g * gain.data
        if x.requires_grad:
            gx = inv * (
                gxh
                - gxh.mean(axis=-1, keepdims=True)
                - xhat * (gxh * xhat).mean(axis=-1, keepdims=True)
            )
        else:
            gx = None
        ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gbias = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), grad_fn)


# ---------------------------------------------------------------- masking


def masked_fill(x, mask, value: float) -> Tensor:
    x = _wrap(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    return _result(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


def topk_keep_mask(scores: np.ndarray, kappa) -> np.ndarray:
    """Boolean mask of the ``kappa`` largest entries per row (ties: lowest column)."""
    kap = np.asarray(kappa)
    if np.any(kap < 1):
        raise DomainError(f"top-k needs kappa >= 1, got {kappa}")
    n = scores.shape[-1]
    order = np.argsort(-scores, axis=-1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(np.arange(n), order.shape), axis=-1)
    if kap.ndim:
        kap = kap.reshape(kap.shape + (1,) * (scores.ndim - kap.ndim))
    return ranks < kap


def topk_mask(scores, kappa) -> Tensor:
    """Keep the ``kappa`` largest entries of each row and set the rest to ``-inf``.

    ``kappa`` is an int or an integer array over the leading (batch) axes.
    Gradients flow to kept entries only.
    """
    scores = _wrap(scores)
    keep = topk_keep_mask(scores.data, kappa)
    out = np.where(keep, scores.data, -np.inf)
    return _result(out, (scores,), lambda g: (np.where(keep, g, 0.0),))
