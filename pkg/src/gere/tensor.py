"""Small reverse-mode autodiff over numpy arrays.

Every op that touches a tensor requiring gradient records a node holding its
parents, a backward closure and a monotonically increasing sequence number.
``backward`` rebuilds the tape from the reachable nodes, sorts it by sequence
number and visits it in exact reverse execution order, so gradients are
deterministic.

Arrays are float32 by default. ``default_dtype(np.float64)`` switches newly
created tensors to 64-bit, which the gradient checks use as reference mode.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_state = threading.local()
_seq = itertools.count()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_consumed", "detached")
    # make numpy defer to our reflected operators (ndarray - Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._seq = -1
        self._consumed = False
        self.detached = False

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        out = Tensor(self.data)
        out.detached = True
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __rtruediv__(self, other):
        return div(other, self)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=get_default_dtype()), requires_grad=True)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_seq)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _node(ad / bd, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # activations times a weight matrix: fold leading dims into one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _node((a2 @ bd).reshape(*ad.shape[:-1], bd.shape[-1]), (a, b), bw2)

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), bw)


# ----------------------------------------------------------- elementwise


def max0(x: Tensor) -> Tensor:
    """max(x, 0). Gradient flows only where x is strictly positive."""
    xd = x.data
    pos = xd > 0
    return _node(np.where(pos, xd, 0).astype(xd.dtype), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    inner = c * (xd + xd.dtype.type(0.044715) * (xd * xd * xd))
    t = np.tanh(inner)
    y = 0.5 * xd * (1 + t)

    def bw(g):
        dinner = c * (1 + xd.dtype.type(3 * 0.044715) * xd * xd)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return _node(y, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gain.data
    y = xhat * gd + bias.data

    def bw(g):
        dxhat = g * gd
        dx = rstd / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        dgain = _unbroadcast(g * xhat, gd.shape)
        dbias = _unbroadcast(g, bias.shape)
        return dx, dgain, dbias

    return _node(y, (x, gain, bias), bw)


# ------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index_select(x: Tensor, index) -> Tensor:
    xd = x.data

    def bw(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, index, g)
        return (gx,)

    return _node(xd[index], (x,), bw)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; backward scatter-adds in index order."""
    ids = np.asarray(ids)
    wd = weight.data

    def bw(g):
        gw = np.zeros_like(wd)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, wd.shape[-1]))
        return (gw,)

    return _node(wd[ids], (weight,), bw)


def take_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick ``x[..., ids[...]]`` along the last axis."""
    ids = np.asarray(ids)[..., None]
    xd = x.data

    def bw(g):
        gx = np.zeros_like(xd)
        np.put_along_axis(gx, ids, g[..., None], axis=-1)
        return (gx,)

    return _node(np.take_along_axis(xd, ids, axis=-1)[..., 0], (x,), bw)


# ------------------------------------------------------------ reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xd = x.data
    y = xd.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).astype(xd.dtype, copy=True),)

    return _node(np.asarray(y, dtype=xd.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over entries where ``mask`` (broadcastable) is true."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("masked_mean: every entry is masked")
    return mul(sum_(mul(x, m.astype(x.dtype))), 1.0 / count)


def gt_mask(x, threshold) -> Tensor:
    """Constant 0/1 tensor for ``x > threshold``; carries no gradient."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    td = threshold.data if isinstance(threshold, Tensor) else threshold
    return Tensor((xd > td).astype(xd.dtype))


def lt_mask(x, threshold) -> Tensor:
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    td = threshold.data if isinstance(threshold, Tensor) else threshold
    return Tensor((xd < td).astype(xd.dtype))


# -------------------------------------------------------------- backward


@dataclass
class Tape:
    """Nodes reachable from a loss, in forward execution order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> Tape:
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph")
    if loss._backward is None:
        raise RuntimeError("loss is not on a tape (detached or built without gradient)")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or parent.detached:
                continue
            if parent._backward is None:
                parent.grad = pg.astype(parent.dtype, copy=True) if parent.grad is None else parent.grad + pg
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for node in tape.nodes:
        node._backward = None
        node._parents = ()
    loss._consumed = True


# ------------------------------------------------------- gradient check


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-3,
    n_samples: int | None = 32,
    seed: int = 0,
    reference_dtype=np.float64,
) -> float:
    """Worst relative error between autodiff and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values. The
    autodiff gradient is taken in the parameters' own dtype; the central
    differences are evaluated with parameters cast to ``reference_dtype``
    (pass None to stay in the native dtype). Indices are sampled per
    parameter, all of them when ``n_samples`` is None. Relative error uses
    ``max(|g|, 1e-8)`` as denominator.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in finite_diff_check")
    backward(loss)
    autos = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    native = [p.data for p in params]
    ref = np.dtype(reference_dtype) if reference_dtype is not None else native[0].dtype
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for p in params:
            p.data = p.data.astype(ref)
        with no_grad(), default_dtype(ref):
            for p, auto in zip(params, autos):
                flat = p.data.reshape(-1)
                if n_samples is None or n_samples >= flat.size:
                    idx = np.arange(flat.size)
                else:
                    idx = np.sort(rng.choice(flat.size, size=n_samples, replace=False))
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = float(f().data)
                    flat[i] = orig - eps
                    fm = float(f().data)
                    flat[i] = orig
                    if not (math.isfinite(fp) and math.isfinite(fm)):
                        raise FloatingPointError("non-finite loss in finite_diff_check")
                    num = (fp - fm) / (2 * eps)
                    g = float(auto.reshape(-1)[i])
                    worst = max(worst, abs(g - num) / max(abs(g), 1e-8))
    finally:
        for p, d in zip(params, native):
            p.data = d
    return worst
