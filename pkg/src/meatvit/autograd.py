"""
Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the output remembers its parents and a closure that maps
the output gradient to the parent gradients. :func:`backward` walks the
recorded graph in reverse topological order.

All data is held as float64 numpy arrays.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from .errors import (
    ContractError,
    DegenerateMaskError,
    NumericDomainError,
    ShapeError,
)

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap ``data``; record the graph edge only when a parent needs a gradient."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes that numpy broadcasting added to reach it."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Graph:
    """Operations reachable from a root tensor, in recording (topological) order.

    Iterating ``reversed(graph.nodes)`` yields a valid reverse-pass order.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative DFS; recursion depth would blow up on long graphs
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t._backward is None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    Gradients add onto any existing ``grad``; call ``zero_grad`` in between to
    start fresh.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires a gradient")
    graph = Graph(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        # interior nodes keep their gradient too, for inspection
        node.grad = g if node.grad is None else node.grad + g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in pending:
                pending[id(parent)] = pending[id(parent)] + pg
            else:
                pending[id(parent)] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def _bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(out, (a, b), _bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def _bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(out, (a, b), _bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def _bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), _bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def _bw(g):
        return (g * c,)

    return _make(out, (a,), _bw, "scale")


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def _bw(g):
        return (2.0 * a.data * g,)

    return _make(out, (a,), _bw, "square")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def _bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), _bw, "gelu")


# ---------------------------------------------------------------- reductions / shape


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), _bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tensor_sum(a, axis), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def _bw(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), _bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def _bw(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), _bw, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    basic = all(isinstance(i, (int, slice, type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def _bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), _bw, "concat")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()

    def _bw(g):
        return (unbroadcast(g, a.shape),)

    return _make(out, (a,), _bw, "broadcast_to")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    Raises :class:`ShapeError` naming both shapes when the inner dims differ.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                # fold batch axes into rows: one big GEMM instead of a batched one
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), _bw, "matmul")


# ---------------------------------------------------------------- softmax family


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what}: input contains NaN or Inf")


def softmax_row(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ContractError("softmax_row needs a last axis of length >= 1")
    _check_finite(a.data, "softmax_row")
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), _bw, "softmax_row")


def masked_softmax_row(a: Tensor, weights: Tensor) -> Tensor:
    """Softmax over the last axis with per-key multiplicative weights.

    ``out_j = w_j exp(a_j - c) / sum_s w_s exp(a_s - c)`` where ``c`` is the
    maximum of ``a`` over keys with ``w > 0``. Keys with zero weight get an
    output of exactly 0.0 regardless of their logit. ``weights`` broadcasts
    against ``a`` (typically shape ``[K]`` shared by every row).
    """
    a, weights = as_tensor(a), as_tensor(weights)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ContractError("masked_softmax_row needs a last axis of length >= 1")
    if weights.shape[-1] != a.shape[-1]:
        raise ShapeError(f"mask weights {weights.shape} do not match keys of {a.shape}")
    _check_finite(a.data, "masked_softmax_row")
    w = weights.data
    if np.any(w < 0.0) or np.any(w > 1.0) or not np.all(np.isfinite(w)):
        raise ContractError("mask weights must lie in [0, 1]")
    active = np.broadcast_to(w > 0.0, a.shape)
    if not np.all(active.any(axis=-1)):
        raise DegenerateMaskError("every key in a row is masked out")
    c = np.where(active, a.data, -np.inf).max(axis=-1, keepdims=True)
    e = np.exp(np.where(active, a.data - c, -np.inf))
    num = w * e
    denom = num.sum(axis=-1, keepdims=True)
    out = num / denom

    def _bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        ga = out * (g - inner) if a.requires_grad else None
        gw = None
        if weights.requires_grad:
            # d out_j / d w_k uses exp(a_k - c) even where w_k == 0
            with np.errstate(over="ignore"):
                e_full = np.exp(a.data - c)
            gw = unbroadcast(e_full / denom * (g - inner), weights.shape)
        return ga, gw

    return _make(out, (a, weights), _bw, "masked_softmax_row")


# ---------------------------------------------------------------- normalisation / loss


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    d = a.shape[-1]
    if d < 1:
        raise ContractError("layer_norm needs d >= 1")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def _bw(g):
        gx = ggain = gbias = None
        if a.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(out, (a, gain, bias), _bw, "layer_norm")


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for {batch} rows")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise IndexError(f"label out of range [0, {classes})")
    _check_finite(logits.data, "cross_entropy")
    logp = log_softmax_np(logits.data)
    rows = np.arange(batch)
    out = -logp[rows, labels].mean()

    def _bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / batch),)

    return _make(np.asarray(out), (logits,), _bw, "cross_entropy")


# ---------------------------------------------------------------- gradient checking


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    indices: Optional[Iterable[Tuple[int, ...]]] = None,
) -> float:
    """Compare ``backward`` against central differences of ``f`` at ``x``.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over the checked
    entries (all of them unless ``indices`` is given). ``f`` must be a
    deterministic, scalar-valued function of ``x``; ``x.data`` is perturbed in
    place and restored.
    """
    x.requires_grad = True
    x.grad = None
    base = f(x)
    if float(f(x).data) != float(base.data):
        raise ContractError("grad_check needs a deterministic function")
    backward(base)
    analytic = x.grad.copy()
    x.grad = None

    if indices is None:
        indices = list(np.ndindex(*x.shape))
    worst = 0.0
    for idx in indices:
        orig = x.data[idx]
        x.data[idx] = orig + step
        plus = float(f(x).data)
        x.data[idx] = orig - step
        minus = float(f(x).data)
        x.data[idx] = orig
        numeric = (plus - minus) / (2.0 * step)
        err = abs(analytic[idx] - numeric) / max(1.0, abs(analytic[idx]))
        worst = max(worst, err)
    return worst
