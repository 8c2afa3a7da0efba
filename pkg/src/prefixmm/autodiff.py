"""Minimal reverse-mode differentiation over numpy arrays.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients. ``Tensor.backward`` walks the graph
in reverse topological order. Broadcasting is restricted: the second
operand's shape must be a suffix of the first's (leading-batch only).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class RankError(ValueError):
    pass


class EmptyLossError(ValueError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "_requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool) -> None:
        self._requires_grad = bool(value)

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_rank(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(self, _wrap(other, self))

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise RankError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
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


def _raise_rank(shape):
    raise RankError(f"item() needs a single-element tensor, got shape {shape}")


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out._requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if len(sb) > len(sa) or sa[len(sa) - len(sb):] != sb:
        raise ShapeError(f"{op}: shape {sb} does not broadcast onto {sa} (only leading batch dims broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "add")
    sb = b.shape
    return _node(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a, b, "sub")
    sb = b.shape
    return _node(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < b.ndim:
        a, b = b, a
    _check_suffix(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape

    def back(g):
        ga = g * bd if a.requires_grad else None
        gb = _unbroadcast(g * ad, sb) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def back(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _node(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _node(t, (x,), lambda g: (g * (1.0 - t * t),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _node(e, (x,), lambda g: (g * e,))


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    inv = np.argsort(axes)
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeError("concat of an empty list")
    ax = axis % xs[0].ndim
    ref = list(xs[0].shape)
    for t in xs[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or s[:ax] + s[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _node(np.concatenate([t.data for t in xs], axis=ax), xs, back)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in xs], axis=axis)


def take_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D table; ``idx`` is any integer array."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _node(table.data[idx], (table,), back)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    ax = axis % x.ndim
    sl = [slice(None)] * x.ndim
    sl[ax] = slice(start, stop)
    sl = tuple(sl)
    shape = x.shape

    def back(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[sl] = g
        return (out,)

    return _node(x.data[sl], (x,), back)


# ---------------------------------------------------------------- reductions

def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), back)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / float(n))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may omit leading batch dims of ``a``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {b.shape} must be a suffix of {a.shape}")
    ad, bd, sb = a.data, b.data, b.shape
    if b.ndim == 2:
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def back2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node((a2 @ bd).reshape(ad.shape[:-1] + (n,)), (a, b), back2)

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb) if b.requires_grad else None
        return ga, gb

    return _node(ad @ bd, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalization / softmax

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm over an empty last dimension")
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def back(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return _node(xhat * gd + bias.data, (x, gain, bias), back)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get probability 0."""
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), back)


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean next-token NLL over positions where ``mask`` is True.

    ``logits`` is [..., vocab]; ``targets`` and ``mask`` match its leading dims.
    """
    targets = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("every position is masked; the loss is undefined")
    vocab = logits.shape[-1]
    sel = targets[mask]
    if sel.size and (sel.min() < 0 or sel.max() >= vocab):
        raise ValueError(f"target id out of range for vocab {vocab}")
    safe = np.where(mask, targets, 0)
    logp = log_softmax_np(logits.data)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * mask).sum() / count

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
        return ((p - onehot) * (mask[..., None] * (g / count)),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), back)


# ---------------------------------------------------------------- checking

def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Worst relative error between the analytic gradient of scalar ``f`` at ``x``
    and a central-difference estimate.

    The relative error of each coordinate is |a - n| / max(1, |a|, |n|), so
    near-zero gradients are compared absolutely.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise RankError("finite_difference_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - h
            fm = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
