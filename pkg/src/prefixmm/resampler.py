"""Condense a variable-length vision token sequence into a fixed query bank."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Attention, FeedForward, LayerNorm, Linear, Module, Parameter, normal
from .vision import EmptyInputError, RawVisionTokens


class ResamplerBlock(Module):
    """Pre-norm cross-attention from queries to vision tokens, then a feed-forward."""

    def __init__(self, rng, d_model: int, n_heads: int, dtype, zero_init_out: bool, self_attn: bool):
        self.ln_q = LayerNorm(d_model, dtype)
        self.ln_kv = LayerNorm(d_model, dtype)
        self.cross = Attention(rng, d_model, n_heads, dtype, zero_out=zero_init_out)
        if self_attn:
            self.ln_self = LayerNorm(d_model, dtype)
            self.self_attn = Attention(rng, d_model, n_heads, dtype, zero_out=zero_init_out)
        self.ln_ff = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(rng, d_model, 4 * d_model, dtype, zero_out=zero_init_out)

    def __call__(self, q: Tensor, kv: Tensor) -> Tensor:
        q = ad.add(q, self.cross(self.ln_q(q), kv=self.ln_kv(kv)))
        if hasattr(self, "self_attn"):
            q = ad.add(q, self.self_attn(self.ln_self(q)))
        return ad.add(q, self.ffn(self.ln_ff(q)))


class Resampler(Module):
    """``queries`` attend over projected raw tokens through ``depth`` blocks.

    Output length is always ``n_queries`` regardless of the input length.
    No positional information is added here.
    """

    def __init__(self, rng, d_vision: int, d_model: int, n_queries: int = 32, depth: int = 2,
                 n_heads: int = 4, dtype=np.float32, zero_init_out: bool = False,
                 self_attn: bool = False, query_std: float = 0.02):
        self.proj = Linear(rng, d_vision, d_model, dtype)
        self.queries = Parameter(normal(rng, (n_queries, d_model), query_std, dtype))
        self.blocks = [ResamplerBlock(rng, d_model, n_heads, dtype, zero_init_out, self_attn)
                       for _ in range(depth)]

    @property
    def n_queries(self) -> int:
        return self.queries.shape[0]

    def __call__(self, raw) -> Tensor:
        tokens = raw.tokens if isinstance(raw, RawVisionTokens) else raw
        if tokens.shape[0] == 0:
            raise EmptyInputError("resampler needs at least one vision token")
        kv = self.proj(tokens)
        q = self.queries
        for blk in self.blocks:
            q = blk(q, kv)
        return q
