"""Reverse-mode automatic differentiation over dense float64 arrays.

Each differentiable operation appends a :class:`Node` to an implicit,
append-only tape: nodes receive a monotonically increasing index at creation,
so any node's inputs always carry smaller indices than the node itself.
:func:`backward` materialises the loss's ancestry as a :class:`Tape` and
replays it in reverse index order.

Broadcasting follows numpy for elementwise operations and batch dimensions
of :func:`matmul`; gradients are summed back onto the original shapes.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ParameterError, ShapeError

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "detach",
    "matmul",
    "softmax_t",
    "log_softmax_t",
    "mean_pool",
    "concat",
    "conv1d",
    "clamp_min",
    "finite_diff_check",
]

_node_ids = itertools.count()
_grad_state = threading.local()

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Node:
    __slots__ = ("index", "op", "parents", "grad_fn", "out_ref")

    def __init__(self, op: str, parents: tuple["Tensor", ...], grad_fn: GradFn, out: "Tensor"):
        self.index = next(_node_ids)
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn
        self.out_ref = weakref.ref(out)

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.op})"


class Tensor:
    """A float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name

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
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # shape and reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        perm = list(range(self.ndim))
        perm[a], perm[b] = perm[b], perm[a]
        return transpose(self, tuple(perm))

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.node = Node(op, parents, grad_fn, out) if track else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shapes(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), grad_fn, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN visible instead of mapping it to 0
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; gradient passes only where ``a >= lo``."""
    keep = a.data >= lo
    return _make(np.maximum(a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# ----------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} disagree") from None

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn, "matmul")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(int(ax) % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axes {tuple(axes)}")
    return tuple(out)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "mean")


def mean_pool(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Arithmetic mean over ``axes``; the pooled axes are removed."""
    axes = _norm_axes(tuple(axes), x.ndim)
    return tmean(x, axes, keepdims=False)


# ----------------------------------------------------------------------------
# softmax family


def _check_temperature(temperature: float) -> float:
    t = float(temperature)
    if not t > 0.0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    return t


def softmax_t(z: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax ``exp((z - max) / T)`` normalised along ``axis``."""
    t = _check_temperature(temperature)
    _norm_axes(axis, z.ndim)
    e = np.exp((z.data - z.data.max(axis=axis, keepdims=True)) / t)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out / t,)

    return _make(out, (z,), grad_fn, "softmax_t")


def log_softmax_t(z: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    t = _check_temperature(temperature)
    _norm_axes(axis, z.ndim)
    s = (z.data - z.data.max(axis=axis, keepdims=True)) / t
    lse = np.log(np.exp(s).sum(axis=axis, keepdims=True))
    out = s - lse
    probs = np.exp(out)

    def grad_fn(g):
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / t,)

    return _make(out, (z,), grad_fn, "log_softmax_t")


def detach(x: Tensor) -> Tensor:
    """Same values, no tape ancestry: gradients never flow back through it."""
    return Tensor(x.data)


# ----------------------------------------------------------------------------
# convolution


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` ([C_in, L] or [B, C_in, L]) with ``weight`` [C_out, C_in, k]."""
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv1d: bad stride={stride} / padding={padding}")
    unbatched = x.ndim == 2
    if x.ndim not in (2, 3) or weight.ndim != 3:
        raise ShapeError(f"conv1d: expected x [C,L] or [B,C,L] and 3-d kernels, got {x.shape}, {weight.shape}")
    xd = x.data[None] if unbatched else x.data
    n, c_in, length = xd.shape
    c_out, wc, k = weight.shape
    if wc != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels but kernels {weight.shape} expect {wc}")
    padded = length + 2 * padding
    if padded < k:
        raise ShapeError(f"conv1d: input length {length} (+2*{padding} padding) shorter than kernel {k}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    l_out = (padded - k) // stride + 1
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # [B, C_in, L_out, k]
    out = np.tensordot(cols, weight.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out)
    if unbatched:
        out = out[0]

    def grad_fn(g):
        gb = g[None] if unbatched else g
        gw = np.tensordot(gb, cols, axes=([0, 2], [0, 2]))
        gcols = np.tensordot(gb, weight.data, axes=([1], [0]))  # [B, L_out, C_in, k]
        gxp = np.zeros_like(xp)
        span = stride * (l_out - 1) + 1
        for j in range(k):
            gxp[:, :, j:j + span:stride] += gcols[:, :, :, j].transpose(0, 2, 1)
        gx = gxp[:, :, padding:padding + length] if padding else gxp
        if unbatched:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, grad_fn, "conv1d")


# ----------------------------------------------------------------------------
# tape replay


@dataclass
class Tape:
    """Recorded operations of one loss's ancestry, in creation order."""

    nodes: list[Node]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [loss.node] if loss.node is not None else []
        while stack:
            node = stack.pop()
            if node.index in seen:
                continue
            seen[node.index] = node
            for p in node.parents:
                if p.node is not None and p.node.index not in seen:
                    stack.append(p.node)
        return cls([seen[i] for i in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tracked ancestor of a scalar ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not recorded on a tape")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    pending: dict[int, np.ndarray] = {loss.node.index: seed}
    for node in reversed(Tape.from_loss(loss).nodes):
        g = pending.pop(node.index, None)
        if g is None:
            continue
        out = node.out_ref()
        if out is not None:
            out.grad = g
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node is not None:
                key = parent.node.index
                pending[key] = pg if key not in pending else pending[key] + pg
            else:
                parent.grad = np.array(pg, dtype=np.float64) if parent.grad is None else parent.grad + pg


# ----------------------------------------------------------------------------
# finite differences


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` at ``x`` and central differences.

    ``error_i = |analytic_i - (f(x + h e_i) - f(x - h e_i)) / 2h| / (|analytic_i| + 1e-8)``
    """
    if not h > 0:
        raise ParameterError(f"finite_diff_check: h must be > 0, got {h}")
    base = np.array(x.data, dtype=np.float64)
    probe = Tensor(base, requires_grad=True)
    backward(f(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    numeric = np.empty_like(base)
    with no_grad():
        for i in range(base.size):
            xp = base.copy()
            xm = base.copy()
            xp.flat[i] += h
            xm.flat[i] -= h
            numeric.flat[i] = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * h)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
