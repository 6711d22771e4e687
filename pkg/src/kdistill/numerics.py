"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value in the package is a :class:`Tensor`.  A tensor is a matrix
(``rows x cols``, the last two axes) optionally stacked along leading batch
axes; matrix semantics are always per trailing 2-D block.  Operations record
their inputs and a backward closure whenever any input requires a gradient,
and :func:`backward` replays that graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

KL_EPS = 1e-12
PROB_TOL = 1e-6

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ValidationError(ValueError):
    """Raised when operand values violate an operation's precondition."""


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


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._consumed = False
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(rows: int, cols: int, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros((rows, cols)), requires_grad=requires_grad)

    @staticmethod
    def eye(n: int) -> "Tensor":
        return Tensor(np.eye(n))

    # -- metadata -------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other) -> "Tensor":
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(_wrap(other), self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def transpose(self) -> "Tensor":
        return swap_last(self)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def permute(self, *axes) -> "Tensor":
        return permute(self, axes)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), bw, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._result(out, (a,), bw, "gelu")


# -- structural ----------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


def swap_last(a: Tensor) -> Tensor:
    return Tensor._result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over ``axis``; a full reduction returns a 1x1 tensor."""
    shape = a.shape
    if axis is None and not keepdims:
        out = np.array(a.data.sum()).reshape(1, 1)
        return Tensor._result(out, (a,), lambda g: (np.full(shape, g.reshape(-1)[0]),), "sum")
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.array(a.data[idx]), (a,), bw, "getitem")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer ids (any id array shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.rows):
        raise ValidationError(f"take_rows: id out of range [0, {table.rows})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return Tensor._result(table.data[ids], (table,), bw, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._result(out, tensors, bw, "concat")


# -- softmax family ------------------------------------------------------------
def _masked_logits(x: np.ndarray, key_mask) -> np.ndarray:
    if key_mask is None:
        return x
    return np.where(key_mask, x, -np.inf)


def softmax_rows(x: Tensor, key_mask=None) -> Tensor:
    """Row-wise softmax over the last axis.

    ``key_mask`` is a boolean array broadcastable to ``x``; False entries are
    treated as -inf logits and receive exactly zero probability.
    """
    z = _masked_logits(x.data, key_mask)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (x,), bw, "softmax")


def log_softmax_rows(x: Tensor, key_mask=None) -> Tensor:
    """Row-wise log-softmax; masked entries are returned as 0 and get no gradient."""
    z = _masked_logits(x.data, key_mask)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    y = np.exp(out)
    if key_mask is not None:
        out = np.where(key_mask, out, 0.0)

    def bw(g):
        if key_mask is not None:
            g = np.where(key_mask, g, 0.0)
        return (g - y * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), bw, "log_softmax")


# -- losses --------------------------------------------------------------------
def _check_stochastic(t: Tensor, name: str) -> None:
    sums = t.data.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= PROB_TOL) or np.any(t.data < 0):
        raise ValidationError(f"{name}: rows must be probability vectors (row sums {sums.min():.6g}..{sums.max():.6g})")


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Per-row KL(p || q) over the last axis; output drops that axis.

    Uses 0*ln(0/q) = 0 and clamps q from below at ``KL_EPS`` before the log.
    """
    if p.shape != q.shape:
        raise ShapeError(f"kl_rows: shape mismatch {p.shape} vs {q.shape}")
    _check_stochastic(p, "kl_rows(p)")
    _check_stochastic(q, "kl_rows(q)")
    pd, qd = p.data, q.data
    pos = pd > 0
    qc = np.maximum(qd, KL_EPS)
    safe_p = np.where(pos, pd, 1.0)
    terms = np.where(pos, pd * (np.log(safe_p) - np.log(qc)), 0.0)
    out = terms.sum(axis=-1)

    def bw(g):
        g = g[..., None]
        gp = gq = None
        if p.requires_grad:
            gp = g * np.where(pos, np.log(safe_p) - np.log(qc) + 1.0, 0.0)
        if q.requires_grad:
            gq = g * np.where(qd > KL_EPS, -pd / qc, 0.0)
        return gp, gq

    return Tensor._result(out, (p, q), bw, "kl_rows")


def kl_div_rows(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of row-wise KL(p || q), as a 1x1 tensor."""
    return tmean(kl_rows(p, q))


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference over all elements, as a 1x1 tensor."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return tmean(d * d)


# -- graph traversal -----------------------------------------------------------
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    The recorded graph is released afterwards; a second call on the same
    loss raises.  Run the forward pass again to get a fresh graph.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar (1x1), got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward: graph already consumed; rerun the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("backward: loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._backward = None
            node._parents = ()
            node._consumed = True
    loss._consumed = True


def graph_size(t: Tensor) -> int:
    """Number of recorded (non-leaf) nodes reachable from ``t``."""
    if not t.requires_grad:
        return 0
    return sum(1 for n in _topo_order(t) if not n.is_leaf)


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between the analytic gradient and central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``x`` must require grad; its ``.grad`` is overwritten.
    """
    if h <= 0:
        raise ValueError("grad_check: step must be positive")
    if not x.requires_grad:
        raise ValueError("grad_check: x must require grad")
    x.grad = None
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise ValidationError("grad_check: non-finite function value")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(x).item()
            flat[i] = orig - h
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValidationError("grad_check: non-finite function value")
            numeric = (fp - fm) / (2 * h)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
