"""Dense tensors with tape-based reverse-mode automatic differentiation.

The engine is deliberately small: every differentiable operation is a plain
function that computes its output with numpy and registers a closure mapping
the output gradient to gradients of its inputs.  Operations performed while a
:class:`Tape` is active are appended to it in execution order, which is by
construction a topological order.  :func:`backward` replays a tape (or, when
no tape is given, a topological sort of the graph reachable from the loss) in
reverse.

Broadcasting is intentionally narrow.  Elementwise binary operations accept a
second operand that is either the same shape as the first or broadcastable
*into* it (the bias-add pattern).  ``matmul`` accepts a 2-D right operand that
is shared across the leading batch axes of the left operand.  Anything else is
a :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

__all__ = [
    "DEFAULT_DTYPE",
    "Tensor",
    "Tape",
    "DimensionError",
    "NumericError",
    "ContractError",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "expand",
    "tensor_sum",
    "tensor_mean",
    "exp",
    "log",
    "relu",
    "gelu",
    "softmax",
    "softmax_rows",
    "log_softmax",
    "layer_norm",
    "dropout",
    "stop_gradient",
    "pick",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(FloatingPointError):
    """NaN or Inf encountered where finite values are required."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class _ThreadState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tapes: list["Tape"] = []


_STATE = _ThreadState()  # per thread, so parallel evaluation cannot leak grad mode


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (current thread only)."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tape:
    """Ordered record of operations executed while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = f(x)
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _STATE.tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _STATE.tapes.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A numpy array with an optional gradient buffer.

    Parameters
    ----------
    data : array_like
        Values. Floating arrays keep their dtype; anything else is cast to
        :data:`DEFAULT_DTYPE` unless ``dtype`` is given.
    requires_grad : bool
        Whether ``backward`` should populate ``grad`` for this tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise NumericError(f"{what} contains NaN or Inf")
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        if _STATE.tapes:
            _STATE.tapes[-1].nodes.append(out)
    return out


def _check_into(a: Tensor, b: Tensor, op: str) -> None:
    """``b`` must equal ``a``'s shape or broadcast into it without growing it."""
    if a.shape == b.shape:
        return
    ok = b.ndim <= a.ndim and all(
        bd in (1, ad) for ad, bd in zip(a.shape[a.ndim - b.ndim:], b.shape)
    )
    if not ok:
        raise DimensionError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_into(a, b, "add")

    def bw(g):
        return g, _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_into(a, b, "sub")

    def bw(g):
        return g, -_unbroadcast(g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_into(a, b, "mul")

    def bw(g):
        ga = g * b.data if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c_arr = np.asarray(c, dtype=a.dtype)
    return _make(a.data * c_arr, (a,), lambda g: (g * c_arr,), "scale")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported forms: ``[m,k] @ [k,n]``; ``[...,m,k] @ [k,n]`` (shared right
    operand); ``[...,m,k] @ [...,k,n]`` with identical leading axes.
    """
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and b.ndim > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                gb = a2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs ndim >= 2, got {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]}") from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, bw, "concat")


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; an int index drops the axis."""
    index_arr = np.asarray(index)
    out = np.take(a.data, index_arr, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        if index_arr.ndim == 0:
            sl = [slice(None)] * a.ndim
            sl[axis] = int(index_arr)
            full[tuple(sl)] += g
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, index_arr, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (a,), bw, "take")


def expand(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return _make(out, (a,), lambda g: (g.sum(axis=0),), "expand")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _erf32(x: np.ndarray) -> np.ndarray:
    # Abramowitz-Stegun 7.1.26, |err| < 1.5e-7 before float32 rounding; far cheaper than scipy.
    ax = np.abs(x)
    t = np.multiply(ax, np.float32(0.3275911))
    t += 1.0
    np.reciprocal(t, out=t)
    poly = np.multiply(t, np.float32(1.061405429))
    for c in (-1.453152027, 1.421413741, -0.284496736, 0.254829592):
        poly += np.float32(c)
        poly *= t
    np.square(ax, out=ax)
    np.negative(ax, out=ax)
    np.exp(ax, out=ax)
    poly *= ax
    np.subtract(1.0, poly, out=poly, dtype=np.float32)
    return np.copysign(poly, x, out=poly)


def gelu(a: Tensor) -> Tensor:
    """GELU, ``x * Phi(x)``.  Exact erf in float64; a 1.5e-7 rational erf in float32."""
    x = a.data
    z = x * (np.float32(_INV_SQRT2) if x.dtype == np.float32 else _INV_SQRT2)
    cdf = 0.5 * (1.0 + (_erf32(z) if x.dtype == np.float32 else erf(z)))

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make((x * cdf).astype(x.dtype, copy=False), (a,), bw, "gelu")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    if not a.is_finite():
        raise NumericError("softmax input contains NaN or Inf")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


softmax_rows = softmax


def log_softmax(a: Tensor) -> Tensor:
    if not a.is_finite():
        raise NumericError("log_softmax input contains NaN or Inf")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs a last axis of size >= 2, got {x.shape}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``p == 0`` or ``rng`` is None."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / np.asarray(1.0 - p, dtype=a.dtype)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def pick(a: Tensor, labels) -> Tensor:
    """Gather ``a[..., labels]`` along the last axis; output drops that axis."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != a.shape[:-1]:
        raise DimensionError(f"pick: labels {labels.shape} vs values {a.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= a.shape[-1]):
        raise IndexError(f"label out of range for {a.shape[-1]} classes")
    idx = labels[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), bw, "pick")


# ---------------------------------------------------------------------------
# reverse pass


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


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Intermediate gradients live only for the duration of the call, so calling
    twice doubles leaf gradients and nothing else.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None:
        nodes = [n for n in tape.nodes]
        if not nodes or nodes[-1] is not loss:
            nodes = [n for n in nodes if n is not loss] + [loss]
    else:
        nodes = _topo_order(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = node
            grads[id(node)] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
            if p._backward is None:
                leaves[id(p)] = p
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-6,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between autodiff and central differences.

    The error per coordinate is ``|auto - fd| / max(1, |fd|)``.  ``coords``
    restricts the probe to a subset of flat indices of ``x``.
    """
    x.check_finite("grad_check input")
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    auto = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(float(auto.reshape(-1)[i]) - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
