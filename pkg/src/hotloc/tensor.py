"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly with numpy and, when any input requires a
gradient, records a closure that maps the output gradient to input gradients.
``Tensor.backward`` replays those closures in reverse topological order.

Forward matmuls report multiply-accumulate counts to any active
:class:`FlopCounter`, labelled by the current :func:`mac_scope` path.
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_local = threading.local()


def _scope_stack() -> list[str]:
    if not hasattr(_local, "scopes"):
        _local.scopes = []
    return _local.scopes


def _counter_stack() -> list["FlopCounter"]:
    if not hasattr(_local, "counters"):
        _local.counters = []
    return _local.counters


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


# ---------------------------------------------------------------------------
# MAC accounting


class FlopCounter:
    """Multiply-accumulate counts keyed by ``/``-joined scope paths.

    A matmul executed under scopes ``a`` then ``b`` is added to ``"a"``,
    ``"a/b"`` and ``"total"``.
    """

    def __init__(self) -> None:
        self.counts: dict[str, int] = defaultdict(int)

    def __enter__(self) -> "FlopCounter":
        _counter_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _counter_stack().remove(self)

    def add(self, macs: int, path: Sequence[str]) -> None:
        self.counts["total"] += macs
        for i in range(1, len(path) + 1):
            self.counts["/".join(path[:i])] += macs

    def matching(self, prefix: str = "", leaf: str | None = None) -> int:
        """Sum of full-path counts under ``prefix`` whose last label is ``leaf``."""
        total = 0
        for key, value in self.counts.items():
            if key == "total":
                continue
            if prefix and not (key == prefix or key.startswith(prefix + "/")):
                continue
            if leaf is not None and key.rsplit("/", 1)[-1] != leaf:
                continue
            total += value
        return total


@contextlib.contextmanager
def mac_scope(label: str):
    stack = _scope_stack()
    stack.append(label)
    try:
        yield
    finally:
        stack.pop()


def record_macs(macs: int) -> None:
    counters = _counter_stack()
    if counters:
        path = tuple(_scope_stack())
        for c in counters:
            c.add(int(macs), path)


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward: Callable, op: str) -> Tensor:
    parents = tuple(parents)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def power(x: Tensor, p: float) -> Tensor:
    return _make(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),), "power")


def maximum(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``, NaN propagating; subgradient 0 where ``x <= floor``."""
    keep = x.data > floor
    return _make(np.maximum(x.data, floor), (x,), lambda g: (g * keep,), "maximum")


def relu(x: Tensor) -> Tensor:
    return maximum(x, 0.0)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_advanced(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def index(x: Tensor, key) -> Tensor:
    advanced = _is_advanced(key)

    def backward(g):
        gx = np.zeros_like(x.data)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] = g
        return (gx,)

    return _make(x.data[key], (x,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[...] = x[idx[...]]`` with ``idx == -1`` producing zero rows."""
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = x.data[safe]
    all_valid = bool(valid.all())
    if not all_valid:
        out[~valid] = 0.0

    def backward(g):
        gx = np.zeros_like(x.data)
        if all_valid:
            np.add.at(gx, safe.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        else:
            np.add.at(gx, idx[valid], g[valid])
        return (gx,)

    return _make(out, (x,), backward, "gather_rows")


def segment_sum(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Row-wise scatter-add of ``x`` into ``num_segments`` output rows."""
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, segments, x.data)
    return _make(out, (x,), lambda g: (g[segments],), "segment_sum")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched product over the last two axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, p = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    record_macs(batch * m * n * p)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis, any number of leading axes."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = y + bias
    return reshape(y, lead + (weight.shape[-1],))


# ---------------------------------------------------------------------------
# fused normalization ops


def softmax_masked(x, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("softmax_masked: a row has no valid entries")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make(out, (x, gamma, beta), backward, "layernorm")


def l2_normalize(x: Tensor) -> Tensor:
    return x / sqrt(sum_(x * x))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    probes: dict[int, np.ndarray] | None = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` recomputes a scalar from the current values of ``params``.
    ``probes`` optionally restricts the check to flat element indices per
    parameter position. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for i, p in enumerate(params):
            flat = p.data.reshape(-1)
            indices = range(flat.size) if probes is None else probes.get(i, [])
            for j in indices:
                orig = flat[j]
                flat[j] = orig + h
                up = f().item()
                flat[j] = orig - h
                down = f().item()
                flat[j] = orig
                num = (up - down) / (2.0 * h)
                ana = analytic[i].reshape(-1)[j]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# attention


class AttentionRecorder:
    """Collects attention matrices produced by :func:`mhsa` while active."""

    def __init__(self) -> None:
        self.records: list[tuple[str, np.ndarray]] = []

    def __enter__(self) -> "AttentionRecorder":
        _local.recorder = self
        return self

    def __exit__(self, *exc) -> None:
        _local.recorder = None


def mhsa(
    x: Tensor,
    mask: np.ndarray | None,
    heads: int,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
) -> Tensor:
    """Multi-head self-attention over ``x`` of shape ``[B, T, C]``.

    ``mask`` is a ``[B, T]`` key-validity array (``None`` means all valid).
    Score and value products run under the ``attn`` MAC scope so they can be
    counted separately from the projections.
    """
    b, t, c = x.shape
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    dh = c // heads

    def split(y: Tensor) -> Tensor:
        return transpose(reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, wq))
    k = split(linear(x, wk))
    v = split(linear(x, wv))
    key_mask = None if mask is None else np.asarray(mask, dtype=bool).reshape(b, 1, 1, t)
    with mac_scope("attn"):
        scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        attn = softmax_masked(scores, key_mask)
        ctx = matmul(attn, v)
    recorder = getattr(_local, "recorder", None)
    if recorder is not None:
        recorder.records.append(("/".join(_scope_stack()), attn.data.copy()))
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, c))
    return linear(ctx, wo)
