"""Decoder-only multimodal model with two fusion modes.

``prefix``: condensed vision tokens, a learned media-boundary embedding and
the text are concatenated into one causal sequence; bottleneck adapters sit
after every ``adapter_interval`` decoder blocks.

``cross_attention``: the decoder sees text only; gated cross-attention
blocks (tanh gates, zero at init) read the condensed vision tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .nn import Attention, Block, FeedForward, LayerNorm, Linear, Module, Parameter, causal_mask, normal
from .resampler import Resampler
from .tokenizer import VOCAB_SIZE
from .vision import VisionTower

FUSION_MODES = ("prefix", "cross_attention")


class ContextLengthError(ValueError):
    pass


class ConfigMismatchError(ConfigError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 256
    adapter_interval: int = 1
    adapter_bottleneck: int | None = None
    fusion_mode: str = "prefix"
    llm_frozen: bool = True
    cross_attn_interval: int = 1
    bidirectional_prefix: bool = False
    d_vision: int = 128
    vision_depth: int = 1
    vision_heads: int = 4
    vision_grid: tuple[int, int] = (16, 16)
    max_frames: int = 8
    train_vision: bool = False
    n_queries: int = 32
    resampler_depth: int = 2
    resampler_heads: int = 4
    resampler_self_attn: bool = False
    resampler_zero_init: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.adapter_bottleneck is None:
            self.adapter_bottleneck = self.d_model // 2
        self.vision_grid = tuple(self.vision_grid)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} must be divisible by n_heads {self.n_heads}")
        if not 1 <= self.adapter_bottleneck < self.d_model:
            raise ConfigError(f"adapter_bottleneck must be in [1, d_model), got {self.adapter_bottleneck}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.adapter_interval < 1 or self.cross_attn_interval < 1:
            raise ConfigError("adapter and cross-attention intervals must be >= 1")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    # model card: one "key = json-value" line per field
    def to_card(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_card(cls, text: str) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigMismatchError(f"unknown model-card key {key!r}")
            values[key] = json.loads(raw.strip())
        return cls(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vision_grid"] = list(self.vision_grid)
        return d


def write_model_card(cfg: ModelConfig, path) -> None:
    Path(path).write_text(cfg.to_card())


def check_model_card(cfg: ModelConfig, path) -> None:
    on_disk = ModelConfig.from_card(Path(path).read_text())
    if on_disk != cfg:
        diff = {k: (getattr(on_disk, k), getattr(cfg, k)) for k in cfg.to_dict()
                if getattr(on_disk, k) != getattr(cfg, k)}
        raise ConfigMismatchError(f"model card does not match config: {diff}")


class Adapter(Module):
    """x + up(silu(down(layer_norm(x)))) with ``up`` zero-initialized."""

    def __init__(self, rng, d_model: int, bottleneck: int, dtype=np.float32):
        if bottleneck < 1:
            raise ValueError("adapter bottleneck must be >= 1")
        self.norm = LayerNorm(d_model, dtype)
        self.down = Linear(rng, d_model, bottleneck, dtype)
        self.up = Linear(rng, bottleneck, d_model, dtype, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(x, self.up(ad.silu(self.down(self.norm(x)))))


def build_adapter(cfg: ModelConfig, rng=None) -> Adapter:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return Adapter(rng, cfg.d_model, cfg.adapter_bottleneck, cfg.np_dtype)


class GatedCrossAttention(Module):
    """Text queries attend to vision tokens; both residual branches are tanh-gated."""

    def __init__(self, rng, d_model: int, n_heads: int, dtype=np.float32):
        self.ln_attn = LayerNorm(d_model, dtype)
        self.attn = Attention(rng, d_model, n_heads, dtype)
        self.attn_gate = Parameter(np.zeros((), dtype))
        self.ln_ff = LayerNorm(d_model, dtype)
        self.ffn = FeedForward(rng, d_model, 4 * d_model, dtype)
        self.ff_gate = Parameter(np.zeros((), dtype))

    def __call__(self, x: Tensor, vision: Tensor | None, present: np.ndarray | None = None) -> Tensor:
        if vision is None:
            return x
        a = ad.mul(self.attn(self.ln_attn(x), kv=vision), ad.tanh(self.attn_gate))
        if present is not None:
            a = ad.mul(a, Tensor(np.broadcast_to(present, a.shape).astype(a.dtype)))
        x = ad.add(x, a)
        f = ad.mul(self.ffn(self.ln_ff(x)), ad.tanh(self.ff_gate))
        if present is not None:
            f = ad.mul(f, Tensor(np.broadcast_to(present, f.shape).astype(f.dtype)))
        return ad.add(x, f)


class Decoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        dt = cfg.np_dtype
        d = cfg.d_model
        self.tok_embed = Parameter(normal(rng, (cfg.vocab_size, d), 1.0, dt))
        self.pos_embed = Parameter(normal(rng, (cfg.max_seq_len, d), 0.1, dt))
        self.blocks = [Block(rng, d, cfg.n_heads, dt) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(d, dt)
        self.head = Linear(rng, d, cfg.vocab_size, dt, bias=False, std=1.0 / np.sqrt(d))
        self.media_embed = Parameter(normal(rng, (d,), 0.02, dt))
        if cfg.fusion_mode == "prefix":
            self.adapters = [Adapter(rng, d, cfg.adapter_bottleneck, dt) for _ in self.adapter_slots(cfg)]
        else:
            self.xattn = [GatedCrossAttention(rng, d, cfg.n_heads, dt) for _ in self.xattn_slots(cfg)]

    @staticmethod
    def adapter_slots(cfg: ModelConfig) -> list[int]:
        return [i for i in range(cfg.n_layers) if (i + 1) % cfg.adapter_interval == 0]

    @staticmethod
    def xattn_slots(cfg: ModelConfig) -> list[int]:
        return [i for i in range(cfg.n_layers) if i % cfg.cross_attn_interval == 0]

    def base_parameters(self) -> list[Parameter]:
        out = [self.tok_embed, self.pos_embed, *self.ln_f.parameters(), *self.head.parameters()]
        for blk in self.blocks:
            out.extend(blk.parameters())
        return out


@dataclass
class Packed:
    """A right-padded batch. ``text_start[b]`` is the index of sample b's first text id."""

    logits: Tensor  # [B, S, vocab]
    text_start: list[int]
    lengths: list[int]
    vision_len: list[int] = field(default_factory=list)


class MultimodalModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        self.vision = VisionTower(rng, cfg.d_vision, cfg.vision_depth, cfg.vision_heads,
                                  cfg.vision_grid, cfg.max_frames, dt)
        self.resampler = Resampler(rng, cfg.d_vision, cfg.d_model, cfg.n_queries, cfg.resampler_depth,
                                   cfg.resampler_heads, dt, cfg.resampler_zero_init, cfg.resampler_self_attn)
        self.decoder = Decoder(rng, cfg)
        self.assign_names()
        self.apply_trainability()

    # ------------------------------------------------------------ trainability

    def apply_trainability(self) -> None:
        cfg = self.cfg
        self.freeze(False)
        for p in self.decoder.base_parameters():
            p.frozen = cfg.llm_frozen
        self.vision.freeze(not cfg.train_vision)
        if cfg.fusion_mode == "cross_attention":
            self.decoder.media_embed.frozen = True

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    # ------------------------------------------------------------ vision path

    def encode_media(self, media) -> Tensor:
        """Raw pixels (image or clip) -> condensed [Q, d_model] tokens."""
        if self.cfg.train_vision:
            raw = self.vision.encode(media)
        else:
            with ad.no_grad():
                raw = self.vision.encode(media)
        return self.resampler(raw)

    # ------------------------------------------------------------ decoder

    def sequence_length(self, n_vision: int, n_text: int) -> int:
        if self.cfg.fusion_mode == "prefix" and n_vision:
            return n_vision + 1 + n_text
        return n_text

    def forward(self, visions: Sequence[Tensor | None], texts: Sequence[Sequence[int]],
                use_adapters: bool = True) -> Packed:
        if len(visions) != len(texts):
            raise ValueError("visions and texts must have the same batch size")
        if self.cfg.fusion_mode == "prefix":
            return self._forward_prefix(visions, texts, use_adapters)
        return self._forward_cross(visions, texts)

    def _check_len(self, n_vision: int, n_text: int) -> None:
        total = self.sequence_length(n_vision, n_text)
        if total > self.cfg.max_seq_len:
            raise ContextLengthError(
                f"sequence of {total} positions (vision {n_vision}, text {n_text}) "
                f"exceeds max_seq_len {self.cfg.max_seq_len}")

    def _embed_rows(self, rows: list[list[Tensor]], lengths: list[int]) -> Tensor:
        dec = self.decoder
        d = self.cfg.d_model
        S = max(lengths)
        dt = dec.tok_embed.dtype
        padded = []
        for parts, n in zip(rows, lengths):
            if n < S:
                parts = parts + [Tensor(np.zeros((S - n, d), dt))]
            padded.append(parts[0] if len(parts) == 1 else ad.concat(parts, axis=0))
        x = ad.stack(padded, axis=0)
        return ad.add(x, ad.slice_axis(dec.pos_embed, 0, S))

    def _forward_prefix(self, visions, texts, use_adapters) -> Packed:
        dec = self.decoder
        d = self.cfg.d_model
        rows, lengths, starts, vlens = [], [], [], []
        for v, ids in zip(visions, texts):
            nv = 0 if v is None else v.shape[0]
            self._check_len(nv, len(ids))
            parts = []
            if nv:
                parts += [v, ad.reshape(dec.media_embed, (1, d))]
            if len(ids):
                parts.append(ad.take_rows(dec.tok_embed, np.asarray(ids)))
            rows.append(parts)
            starts.append(nv + 1 if nv else 0)
            lengths.append(self.sequence_length(nv, len(ids)))
            vlens.append(nv)
        x = self._embed_rows(rows, lengths)
        S = x.shape[1]
        if self.cfg.bidirectional_prefix and any(vlens):
            mask = np.stack([causal_mask(S, nv + 1 if nv else 0) for nv in vlens])[:, None]
        else:
            mask = causal_mask(S)
        slots = set(Decoder.adapter_slots(self.cfg))
        adapters = iter(dec.adapters)
        for i, blk in enumerate(dec.blocks):
            x = blk(x, mask)
            if i in slots:
                adapter = next(adapters)
                if use_adapters:
                    x = adapter(x)
        logits = dec.head(dec.ln_f(x))
        return Packed(logits, starts, lengths, vlens)

    def _forward_cross(self, visions, texts) -> Packed:
        dec = self.decoder
        rows, lengths = [], []
        for ids in texts:
            self._check_len(0, len(ids))
            rows.append([ad.take_rows(dec.tok_embed, np.asarray(ids))])
            lengths.append(len(ids))
        x = self._embed_rows(rows, lengths)
        B, S = x.shape[0], x.shape[1]
        vis, present = None, None
        have = [v is not None for v in visions]
        if any(have):
            ref = next(v for v in visions if v is not None)
            zeros = Tensor(np.zeros(ref.shape, ref.dtype))
            vis = ad.stack([v if v is not None else zeros for v in visions], axis=0)
            if not all(have):
                present = np.asarray(have, dtype=float).reshape(B, 1, 1)
        mask = causal_mask(S)
        slots = Decoder.xattn_slots(self.cfg)
        xattn = dict(zip(slots, dec.xattn))
        for i, blk in enumerate(dec.blocks):
            if i in xattn:
                x = xattn[i](x, vis, present)
            x = blk(x, mask)
        logits = dec.head(dec.ln_f(x))
        return Packed(logits, [0] * B, lengths, [0] * B)

    # ------------------------------------------------------------ scoring

    def next_token_logprobs(self, vision: Tensor | None, texts: Sequence[Sequence[int]]) -> np.ndarray:
        """Log-probabilities of the next token after each text in ``texts`` [B, vocab]."""
        with ad.no_grad():
            packed = self.forward([vision] * len(texts), texts)
        logits = packed.logits.data
        idx = np.asarray(packed.lengths) - 1
        last = logits[np.arange(len(texts)), idx].astype(np.float64)
        return ad.log_softmax_np(last)

    def sequence_logprob(self, vision: Tensor | None, context: Sequence[int], response: Sequence[int],
                         incremental: bool = False) -> float:
        """log p(response | vision, context) as a sum of per-token conditionals."""
        context, response = list(context), list(response)
        if vision is None and not context:
            raise ValueError("text-only scoring needs at least one context token")
        if incremental:
            total = 0.0
            for t, tok in enumerate(response):
                lp = self.next_token_logprobs(vision, [context + response[:t]])
                total += float(lp[0, tok])
            return total
        with ad.no_grad():
            packed = self.forward([vision], [context + response])
        logp = ad.log_softmax_np(packed.logits.data[0].astype(np.float64))
        start = packed.text_start[0] + len(context)
        return float(sum(logp[start + t - 1, tok] for t, tok in enumerate(response)))
