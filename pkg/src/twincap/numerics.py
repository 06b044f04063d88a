"""Dense tensors with tape-based reverse-mode differentiation.

Every op builds its output eagerly and, when gradients are enabled and any
input requires them, records a closure mapping the output gradient to one
gradient per parent.  :func:`backward` walks the recorded graph once in
reverse topological order and then consumes it (parents and closures are
dropped); graphs are rebuilt every training step.

Broadcasting is restricted to trailing-dimension matches: two operands must
have equal shapes, or the shorter shape must equal the trailing dimensions
of the longer one.  Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from twincap import _kernels


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, np.ndarray) and dtype is None:
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = tuple(parents)
                out._backward = backward
                break
    return out


def _const(c, like: Tensor):
    # constants never promote the tensor dtype
    if isinstance(c, np.ndarray):
        return c.astype(like.dtype, copy=False)
    return float(c)


def check_broadcast(a_shape, b_shape):
    if a_shape == b_shape:
        return
    short, long_ = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    if len(short) == len(long_) or tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ShapeError(f"shapes {a_shape} and {b_shape} are not trailing-compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topo(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Grads from earlier calls are overwritten, not accumulated.  The graph is
    consumed afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        if node._backward is None or g is None:
            continue
        for p, gp in zip(node._parents, node._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            p.grad = gp if p.grad is None else p.grad + gp
    for node in order:
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = _const(b, a)
        if isinstance(b, np.ndarray):
            check_broadcast(a.shape, b.shape)
        return _result(a.data + b, (a,), lambda g: (_unbroadcast(g, a.shape),))
    check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -_const(b, a))
    check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = _const(b, a)
        if isinstance(b, np.ndarray):
            check_broadcast(a.shape, b.shape)
        return _result(a.data * b, (a,), lambda g: (_unbroadcast(g * b, a.shape),))
    check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    return _result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / _const(b, a))
    check_broadcast(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


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

    return _result(a.data[idx], (a,), bw)


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(data, tensors, bw)


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a (..., m, k) @ b (..., k, n)``; batch dims equal or ``b`` 2-D."""
    ad, bd = a.data, b.data
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), bw)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------


def _softmax_np(x, axis):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis=-1) -> Tensor:
    p = _softmax_np(a.data, axis)
    return _result(p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw)


def l2_normalize(a: Tensor, axis=-1) -> Tensor:
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    y = x / n
    return _result(y, (a,), lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,))


def cross_entropy(logits: Tensor, targets, mask=None, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed token cross-entropy averaged over unmasked positions.

    The target distribution is ``(1 - smoothing) * onehot + smoothing / V``.
    """
    x = logits.data
    V = x.shape[-1]
    targets = np.asarray(targets)
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("cross_entropy over an all-padding batch")
    m = x.max(axis=-1, keepdims=True)
    logp = x - (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    smooth = -logp.mean(axis=-1)
    per = (1.0 - smoothing) * nll + smoothing * smooth
    w = mask.astype(x.dtype) / count
    loss = np.asarray((per * w).sum(), dtype=x.dtype)

    def bw(g):
        q = np.full(x.shape, smoothing / V, dtype=x.dtype)
        np.put_along_axis(q, targets[..., None], 1.0 - smoothing + smoothing / V, axis=-1)
        return ((np.exp(logp) - q) * (w * g)[..., None],)

    return _result(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# fused neural ops
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x (..., Din) @ w (Din, Dout) + b``."""
    xd, wd = x.data, w.data
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear: input dim {xd.shape[-1]} vs weight {wd.shape}")
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    D = xd.shape[-1]

    def bw(g):
        gx_hat = g * gamma.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        gg = (g * xhat).reshape(-1, D).sum(axis=0)
        gb = g.reshape(-1, D).sum(axis=0)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation of ``x (B, C, ...)``.

    In training mode the running statistics are updated in place:
    ``r <- (1 - momentum) * r + momentum * batch_stat`` with the unbiased
    batch variance, as torch does.
    """
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, xd.shape[1]) + (1,) * (xd.ndim - 2)
    gd = gamma.data.reshape(bshape)
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs batch size >= 2")
        n = xd.size // xd.shape[1]
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * (n / max(n - 1, 1))

        def bw(g):
            gx_hat = g * gd
            gx = rstd * (
                gx_hat
                - gx_hat.mean(axis=axes, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True)
            )
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    else:
        rstd = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(bshape)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * rstd

        def bw(g):
            return g * gd * rstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gd + beta.data.reshape(bshape)
    return _result(out, (x, gamma, beta), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 1-D cross-correlation, ``x (B, Cin, L)``, ``w (Cout, Cin, K)``."""
    if w.shape[2] % 2 == 0:
        raise ValueError("conv1d kernel size must be odd")
    if x.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = _kernels.conv1d_forward(xd, wd)
    if b is not None:
        out = out + b.data[None, :, None]

    def bw(g):
        gx, gw = _kernels.conv1d_backward(g, xd, wd)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _result(out, (x, w) if b is None else (x, w, b), bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 2-D cross-correlation, ``x (B, Cin, H, W)``, ``w (Cout, Cin, KH, KW)``."""
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ValueError("conv2d kernel sizes must be odd")
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = _kernels.conv2d_forward(xd, wd)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def bw(g):
        gx, gw = _kernels.conv2d_backward(g, xd, wd)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _result(out, (x, w) if b is None else (x, w, b), bw)


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over already-projected ``(B, T, D)`` inputs."""
    B, Tq, D = q.shape
    Tk = k.shape[1]
    if k.shape != (B, Tk, D) or v.shape != (B, Tk, D):
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    H = num_heads
    hd = D // H
    scale = 1.0 / math.sqrt(hd)
    qh = q.data.reshape(B, Tq, H, hd).transpose(0, 2, 1, 3)
    kh = k.data.reshape(B, Tk, H, hd).transpose(0, 2, 1, 3)
    vh = v.data.reshape(B, Tk, H, hd).transpose(0, 2, 1, 3)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if causal:
        s = np.where(np.tri(Tq, Tk, dtype=bool), s, -np.inf)
    p = _softmax_np(s, -1)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(B, Tq, D)

    def bw(g):
        gh = g.reshape(B, Tq, H, hd).transpose(0, 2, 1, 3)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ kh) * scale
        gk = (gs.transpose(0, 1, 3, 2) @ qh) * scale

        def merge(t, T):
            return t.transpose(0, 2, 1, 3).reshape(B, T, D)

        return merge(gq, Tq), merge(gk, Tk), merge(gv, Tk)

    return _result(out, (q, k, v), bw)


def embedding(ids, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    td = table.data

    def bw(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(td[ids], (table,), bw)


# ---------------------------------------------------------------------------
# parameter sets
# ---------------------------------------------------------------------------


class ParameterSet:
    """Named, ordered collection of trainable tensors."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._items: OrderedDict[str, Tensor] = OrderedDict(items)

    def __getitem__(self, name):
        return self._items[name]

    def __iter__(self):
        return iter(self._items.items())

    def __len__(self):
        return len(self._items)

    def __contains__(self, name):
        return name in self._items

    def names(self):
        return list(self._items)

    def tensors(self):
        return list(self._items.values())

    def _check_compatible(self, other: "ParameterSet"):
        if self.names() != other.names():
            raise ShapeError("parameter sets differ in names or ordering")
        for (n, a), (_, b) in zip(self, other):
            if a.shape != b.shape:
                raise ShapeError(f"parameter {n}: shape {a.shape} vs {b.shape}")

    def blend_(self, other: "ParameterSet", beta: float):
        """In place: ``self <- beta * self + (1 - beta) * other``."""
        self._check_compatible(other)
        for (_, a), (_, b) in zip(self, other):
            a.data[...] = beta * a.data + (1.0 - beta) * b.data

    def copy_from_(self, other: "ParameterSet"):
        self._check_compatible(other)
        for (_, a), (_, b) in zip(self, other):
            a.data[...] = b.data

    def state(self) -> dict:
        return {n: t.data.copy() for n, t in self}

    def load_state(self, state: dict):
        for n, t in self:
            if state[n].shape != t.shape:
                raise ShapeError(f"parameter {n}: stored {state[n].shape} vs {t.shape}")
            t.data[...] = state[n]

    def max_abs_diff(self, other: "ParameterSet") -> float:
        self._check_compatible(other)
        return max(float(np.max(np.abs(a.data - b.data))) for (_, a), (_, b) in zip(self, other))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    max_abs_error: float
    passed: bool
    per_parameter: list = field(default_factory=list)
    tolerance: float = 1e-4
    failure: str | None = None

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} {self.op_name}: max rel {self.max_rel_error:.3e}, max abs {self.max_abs_error:.3e}"
        if self.failure:
            line += f" ({self.failure})"
        return line


def grad_check(
    f: Callable[[], Tensor],
    params: ParameterSet,
    eps: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    max_coords: int = 64,
    op_name: str = "f",
    floor: float = 1e-8,
) -> GradReport:
    """Compare analytic grads of ``f()`` against central differences.

    ``f`` must rebuild its graph on each call.  Up to ``max_coords``
    coordinates per parameter are sampled with ``rng``.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``; raise ``floor`` when some
    coordinates have a true gradient of zero (for example a key bias under
    softmax), where the ratio would otherwise measure rounding noise.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    rng = rng if rng is not None else np.random.default_rng(0)
    for _, t in params:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in params}

    max_rel = max_abs = 0.0
    per_param = []
    failure = None
    for name, t in params:
        size = t.data.size
        coords = np.arange(size) if size <= max_coords else np.sort(rng.choice(size, max_coords, replace=False))
        flat = t.data.reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            ana = float(analytic[name].reshape(-1)[i])
            if not (np.isfinite(num) and np.isfinite(ana)):
                failure = f"non-finite gradient at {name}[{int(i)}]"
                worst = math.inf
                break
            abs_err = abs(ana - num)
            rel = abs_err / max(abs(ana), abs(num), floor)
            worst = max(worst, rel)
            max_abs = max(max_abs, abs_err)
        per_param.append((name, worst))
        max_rel = max(max_rel, worst)
        if failure:
            break
    passed = failure is None and max_rel <= tol
    return GradReport(op_name, max_rel, max_abs, passed, per_param, tol, failure)
