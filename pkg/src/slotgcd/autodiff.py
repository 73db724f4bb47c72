"""Minimal dense-tensor numerics with reverse-mode automatic differentiation.

Everything runs in 64-bit floats on numpy arrays.  A ``Tensor`` records the
operations that produced it; calling :func:`backward` on a scalar walks the
recorded graph in reverse topological order and accumulates gradients into
every leaf with ``requires_grad`` set.

Hard top-R selections (see :func:`topk_keep`) follow a straight-through
contract: the kept/zeroed index set is treated as a constant within a step,
so kept entries pass their gradient through and zeroed entries receive zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import GraphError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a non-finite entry makes the sum non-finite; O(n) but far cheaper
    # than an elementwise isfinite scan
    if not np.isfinite(arr.sum()):
        raise NumericError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over broadcast axes so it matches ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense n-dimensional float64 array node in a reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self.grad: np.ndarray | None = None
        self._parents = _parents if self.requires_grad else ()
        self._bw = None
        self._backward = _backward
        self._op = _op

    @property
    def _backward(self):
        return self._bw

    @_backward.setter
    def _backward(self, fn):
        # closures capture the parent tensors; dropping them on non-grad
        # nodes lets inference-only graphs free intermediates immediately
        self._bw = fn if (fn is None or self.requires_grad) else None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of ``loss`` into every requires_grad leaf.

    ``loss`` must be a scalar.  A graph may only be traversed once; a second
    backward through the same node raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any requires_grad tensor")
    if loss._backward is None and loss._op != "leaf":
        raise GraphError("graph already consumed; rebuild the forward pass")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is None:
            continue
        node._backward(node.grad)
        # release closures: frees memory and makes graph reuse fail loudly
        node._backward = None
        node._parents = ()


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")
    out._backward = lambda g: (_accum(a, g), _accum(b, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data, _parents=(a, b), _op="sub")
    out._backward = lambda g: (_accum(a, g), _accum(b, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")
    out._backward = lambda g: (_accum(a, g * b.data), _accum(b, g * a.data))
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "div")
    out = Tensor(a.data / b.data, _parents=(a, b), _op="div")

    def _bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")

    def _bw(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    out._backward = _bw
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), _parents=(a,), _op="exp")
    out._backward = lambda g: _accum(a, g * out.data)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), _parents=(a,), _op="log")
    out._backward = lambda g: _accum(a, g / a.data)
    return out


def power(a: Tensor, p: float) -> Tensor:
    out = Tensor(a.data**p, _parents=(a,), _op="power")
    out._backward = lambda g: _accum(a, g * p * a.data ** (p - 1))
    return out


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y, _parents=(a,), _op="sigmoid")
    out._backward = lambda g: _accum(a, g * out.data * (1.0 - out.data))
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), _parents=(a,), _op="tanh")
    out._backward = lambda g: _accum(a, g * (1.0 - out.data**2))
    return out


def gelu(a: Tensor) -> Tensor:
    """Smooth Gaussian-error-linear nonlinearity, exact erf form."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf, _parents=(a,), _op="gelu")

    def _bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf))

    out._backward = _bw
    return out


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _op="sum")

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    out._backward = _bw
    return out


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(1.0 / float(n)))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,), _op="reshape")
    out._backward = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), _parents=(a,), _op="transpose")
    out._backward = lambda g: _accum(a, g.transpose(inv))
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx], _parents=(a,), _op="getitem")

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    out._backward = _bw
    return out


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 _parents=tuple(tensors), _op="concat")
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _bw(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    out._backward = _bw
    return out


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = _as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else len(shape) + axis + 1, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically-stable softmax along ``axis``; rows sum to 1 within 1e-6."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, _parents=(a,), _op="softmax")

    def _bw(g):
        dot = (g * out.data).sum(axis=axis, keepdims=True)
        _accum(a, out.data * (g - dot))

    out._backward = _bw
    return out


def layernorm(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance normalization along ``axis`` (no affine)."""
    mu = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    z = (a.data - mu) * inv
    out = Tensor(z, _parents=(a,), _op="layernorm")

    def _bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gz = (g * z).mean(axis=axis, keepdims=True)
        _accum(a, inv * (g - gm - z * gz))

    out._backward = _bw
    return out


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale along ``axis`` to unit Euclidean norm (within 1e-6 for sane inputs)."""
    norm = np.sqrt((a.data**2).sum(axis=axis, keepdims=True) + eps)
    y = a.data / norm
    out = Tensor(y, _parents=(a,), _op="l2_normalize")

    def _bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, (g - y * dot) / norm)

    out._backward = _bw
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Squared Frobenius norm of (a - b)."""
    d = sub(a, b)
    return sum_(mul(d, d))


def topk_rank(values: np.ndarray, axis: int) -> np.ndarray:
    """Descending-order rank of each entry along ``axis``; ties break toward
    the lower index (stable sort)."""
    order = np.argsort(-values, axis=axis, kind="stable")
    return np.argsort(order, axis=axis, kind="stable")


def topk_keep(a: Tensor, counts, axis: int, keep_top: bool = True) -> Tensor:
    """Zero all but the top ``counts`` entries along ``axis`` (or keep the
    complement when ``keep_top`` is False).

    ``counts`` is an integer or integer array broadcastable against the
    non-``axis`` dims.  Gradient is straight-through on kept entries.
    """
    ranks = topk_rank(a.data, axis)
    counts = np.asarray(counts)
    if counts.ndim > 0:
        counts = np.expand_dims(counts, axis % a.ndim)
    mask = (ranks < counts) if keep_top else (ranks >= counts)
    maskf = mask.astype(np.float64)
    out = Tensor(a.data * maskf, _parents=(a,), _op="topk_keep")
    out._backward = lambda g: _accum(a, g * maskf)
    return out


def where_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise product with a constant 0/1 (or soft, detached) mask."""
    maskf = np.asarray(mask, dtype=np.float64)
    out = Tensor(a.data * maskf, _parents=(a,), _op="where_mask")
    out._backward = lambda g: _accum(a, g * maskf)
    return out


# ---------------------------------------------------------------------------
# recurrent cell
# ---------------------------------------------------------------------------


def gru_params(dim: int, rng: np.random.Generator, scale: float = 0.1) -> dict[str, Tensor]:
    """Fully-gated GRU parameters for hidden/input width ``dim``."""
    names = ["wz", "uz", "wr", "ur", "wh", "uh"]
    params = {n: Tensor(rng.normal(0.0, scale, size=(dim, dim)), requires_grad=True) for n in names}
    for n in ["bz", "br", "bh"]:
        params[n] = Tensor(np.zeros(dim), requires_grad=True)
    return params


def gru_cell(prev: Tensor, update: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Standard fully-gated GRU: z*prev + (1-z)*tanh candidate.

    ``prev`` and ``update`` share shape (..., D).  With all-zero parameters
    the output is 0.5*prev; saturating the update gate returns ``prev``.
    """
    if prev.shape != update.shape:
        raise ShapeError(f"gru_cell: prev {prev.shape} vs update {update.shape}")
    z = sigmoid(update @ params["wz"] + prev @ params["uz"] + params["bz"])
    r = sigmoid(update @ params["wr"] + prev @ params["ur"] + params["br"])
    n = tanh(update @ params["wh"] + mul(r, prev) @ params["uh"] + params["bh"])
    one = Tensor(1.0)
    return add(mul(z, prev), mul(sub(one, z), n))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a named parameter dict."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One in-place Adam update; parameters with no grad are left untouched."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.data.shape} for '{name}'")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(build_loss, leaves: dict[str, Tensor], h: float = 1e-4,
               max_probes: int = 40, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` maps the leaf dict to a scalar Tensor and is re-invoked
    for every probe, so it must be deterministic.  At most ``max_probes``
    random coordinates per leaf are probed.
    """
    rng = rng or np.random.default_rng(0)
    for p in leaves.values():
        p.grad = None
    loss = build_loss(leaves)
    if not np.isfinite(loss.data):
        raise NumericError("grad_check: non-finite loss")
    backward(loss)

    worst = 0.0
    for name, p in leaves.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_probes else rng.choice(n, size=max_probes, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            hi = float(build_loss(leaves).data)
            flat[i] = orig - h
            lo = float(build_loss(leaves).data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * h)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-4)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
