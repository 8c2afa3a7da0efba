"""Parameters, a module tree, and the transformer building blocks shared by
the vision tower, the resampler and the decoder."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A named leaf tensor. Frozen parameters do not track gradients."""

    __slots__ = ("name", "_frozen")

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype)
        self.name = name
        self._frozen = bool(frozen)

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self._requires_grad = not self._frozen
        if self._frozen:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


class Module:
    """Container that discovers Parameters and sub-Modules through attributes."""

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name}")
            seen.add(name)
            p.name = name

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.frozen = frozen

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)


def normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32, bias: bool = True,
                 std: float | None = None, zero: bool = False):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        w = np.zeros((d_in, d_out), dtype) if zero else normal(rng, (d_in, d_out), std, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d, dtype))
        self.bias = Parameter(np.zeros(d, dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


def causal_mask(n: int, prefix: int = 0) -> np.ndarray:
    """[n, n] boolean mask; the first ``prefix`` positions see each other fully."""
    m = np.tril(np.ones((n, n), dtype=bool))
    if prefix:
        m[:prefix, :prefix] = True
    return m


class Attention(Module):
    """Multi-head attention; self-attention when ``kv`` is omitted."""

    def __init__(self, rng, d_model: int, n_heads: int, dtype=np.float32, d_kv: int | None = None,
                 zero_out: bool = False):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        d_kv = d_model if d_kv is None else d_kv
        self.n_heads = n_heads
        self.q = Linear(rng, d_model, d_model, dtype, bias=False)
        self.k = Linear(rng, d_kv, d_model, dtype, bias=False)
        self.v = Linear(rng, d_kv, d_model, dtype, bias=False)
        self.out = Linear(rng, d_model, d_model, dtype, zero=zero_out)

    def _heads(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        h = self.n_heads
        x = ad.reshape(x, (*lead, n, h, d // h))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return ad.transpose(x, axes)

    def __call__(self, x: Tensor, kv: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        kv = x if kv is None else kv
        q, k, v = self._heads(self.q(x)), self._heads(self.k(kv)), self._heads(self.v(kv))
        dh = q.shape[-1]
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / np.sqrt(dh))
        if mask is not None:
            mask = np.broadcast_to(mask, scores.shape)
        attn = ad.softmax(scores, mask)
        ctx = ad.matmul(attn, v)
        *lead, h, n, _ = ctx.shape
        nl = len(lead)
        ctx = ad.transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
        ctx = ad.reshape(ctx, (*lead, n, h * dh))
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, rng, d_model: int, d_hidden: int, dtype=np.float32, zero_out: bool = False):
        self.up = Linear(rng, d_model, d_hidden, dtype)
        self.down = Linear(rng, d_hidden, d_model, dtype, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ad.silu(self.up(x)))


class Block(Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + ffn(ln(x))."""

    def __init__(self, rng, d_model: int, n_heads: int, dtype=np.float32, ffn_mult: int = 4):
        self.ln1 = LayerNorm(d_model, dtype)
        self.attn = Attention(rng, d_model, n_heads, dtype)
        self.ln2 = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(rng, d_model, ffn_mult * d_model, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = ad.add(x, self.attn(self.ln1(x), mask=mask))
        return ad.add(x, self.ffn(self.ln2(x)))
