"""Autoregressive decoding: beam search, best-of-n top-k/top-p sampling,
length penalty, no-repeat-ngram, and an interactive dialog session.

Hypotheses are ranked by ``cumulative_logprob / length ** length_penalty``
where ``length`` counts generated tokens including <EOS>. With negative
log-probabilities a negative penalty therefore favours shorter outputs.
Top-k/top-p filtering applies only when sampling; beam search ranks the
model's own log-probabilities. The no-repeat-ngram rule looks at the
generated tokens only, not the prompt.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from .data import format_dialog
from .errors import ConfigError
from .model import ContextLengthError
from .tokenizer import EOS, ByteTokenizer

StepFn = Callable[[list[list[int]]], np.ndarray]

DESCRIBE_PROMPT = "Describe the image in detail"


@dataclass(frozen=True)
class GenerationPreset:
    max_new_tokens: int
    beam_size: int
    top_p: float
    top_k: int
    length_penalty: float
    no_repeat_ngram: int
    do_sample: bool
    name: str = "custom"

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.no_repeat_ngram < 0:
            raise ConfigError("no_repeat_ngram must be >= 0")

    def with_overrides(self, **overrides) -> "GenerationPreset":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("name")
        return d


def load_presets(path=None) -> dict[str, GenerationPreset]:
    raw = (resources.files("prefixmm.resources").joinpath("presets.yaml").read_text()
           if path is None else Path(path).read_text())
    doc = yaml.safe_load(raw) or {}
    out = {}
    for name, fields_ in (doc.get("presets") or {}).items():
        try:
            out[name] = GenerationPreset(name=name, **fields_)
        except TypeError as exc:
            raise ConfigError(f"preset {name!r}: {exc}") from exc
    return out


def dump_presets(presets: dict[str, GenerationPreset]) -> str:
    return yaml.safe_dump({"presets": {n: p.to_dict() for n, p in presets.items()}}, sort_keys=False)


def get_preset(name: str, path=None) -> GenerationPreset:
    presets = load_presets(path)
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(presets)}")
    return presets[name]


# ---------------------------------------------------------------- filters

def apply_no_repeat_ngram(prefix: Sequence[int], n: int, logits: np.ndarray) -> np.ndarray:
    """Set to -inf every token that would complete an n-gram already in ``prefix``."""
    out = np.array(logits, dtype=np.float64, copy=True)
    if n <= 0 or len(prefix) < n - 1:
        return out
    prefix = list(prefix)
    tail = tuple(prefix[len(prefix) - n + 1:]) if n > 1 else ()
    banned = {prefix[i + n - 1] for i in range(len(prefix) - n + 1)
              if tuple(prefix[i:i + n - 1]) == tail}
    if banned:
        out[list(banned)] = -np.inf
    return out


def top_k_top_p_filter(logits: np.ndarray, k: int, p: float) -> np.ndarray:
    """Keep the k largest logits, then the smallest head of those whose mass reaches p.

    Returns renormalized log-probabilities with -inf for removed tokens.
    """
    logits = np.asarray(logits, dtype=np.float64)
    order = np.argsort(-logits, kind="stable")
    order = order[np.isfinite(logits[order])][:max(1, k)]
    z = logits[order]
    probs = np.exp(z - z.max())
    probs /= probs.sum()
    cum = np.cumsum(probs)
    n_keep = int(np.searchsorted(cum, p - 1e-12, side="left")) + 1
    keep = order[:min(n_keep, len(order))]
    out = np.full_like(logits, -np.inf)
    kz = logits[keep]
    out[keep] = kz - kz.max() - np.log(np.exp(kz - kz.max()).sum())
    return out


# ---------------------------------------------------------------- search

def length_score(logprob: float, length: int, length_penalty: float) -> float:
    return logprob / (max(length, 1) ** length_penalty)


@dataclass
class BeamHypothesis:
    tokens: list[int]
    logprob: float
    finished: bool = False

    def score(self, length_penalty: float) -> float:
        return length_score(self.logprob, len(self.tokens), length_penalty)


def _bound(h: BeamHypothesis, max_new: int, lp: float) -> float:
    # best score any continuation of h could reach: log-prob only decreases
    lengths = (len(h.tokens) + 1, max_new)
    return max(length_score(h.logprob, n, lp) for n in lengths)


def beam_search(step_fn: StepFn, eos_id: int, max_new_tokens: int, beam_size: int,
                length_penalty: float = 1.0, no_repeat_ngram: int = 0) -> list[BeamHypothesis]:
    """Finished hypotheses sorted best-first.

    ``step_fn(prefixes)`` returns next-token log-probabilities [len(prefixes), vocab]
    for each generated-token prefix. Hypotheses ending in <EOS> are set aside
    and do not occupy beam slots; at ``max_new_tokens`` the live beams finish.
    """
    alive = [BeamHypothesis([], 0.0)]
    finished: list[BeamHypothesis] = []
    for t in range(max_new_tokens):
        rows = step_fn([h.tokens for h in alive])
        cand_lp, cand_src, cand_tok = [], [], []
        for i, h in enumerate(alive):
            row = apply_no_repeat_ngram(h.tokens, no_repeat_ngram, rows[i])
            ok = np.flatnonzero(np.isfinite(row))
            cand_lp.append(h.logprob + row[ok])
            cand_src.append(np.full(ok.size, i))
            cand_tok.append(ok)
        lp_all = np.concatenate(cand_lp)
        src_all = np.concatenate(cand_src)
        tok_all = np.concatenate(cand_tok)
        order = np.lexsort((tok_all, src_all, -lp_all))
        nxt: list[BeamHypothesis] = []
        for j in order:
            toks = alive[src_all[j]].tokens + [int(tok_all[j])]
            if tok_all[j] == eos_id:
                finished.append(BeamHypothesis(toks, float(lp_all[j]), True))
                continue
            nxt.append(BeamHypothesis(toks, float(lp_all[j])))
            if len(nxt) == beam_size:
                break
        alive = nxt
        if t == max_new_tokens - 1:
            for h in alive:
                h.finished = True
            finished.extend(alive)
            alive = []
        if not alive:
            break
        if finished:
            best = max(h.score(length_penalty) for h in finished)
            if best >= max(_bound(h, max_new_tokens, length_penalty) for h in alive):
                break
    finished.sort(key=lambda h: h.score(length_penalty), reverse=True)
    return finished


def sample_search(step_fn: StepFn, eos_id: int, max_new_tokens: int, n_samples: int, top_k: int,
                  top_p: float, length_penalty: float, no_repeat_ngram: int,
                  rng: np.random.Generator) -> list[BeamHypothesis]:
    """``n_samples`` independent filtered samples, ranked like beam hypotheses.

    Scores use the model's log-probabilities (before filtering).
    """
    hyps = [BeamHypothesis([], 0.0) for _ in range(n_samples)]
    for t in range(max_new_tokens):
        live = [h for h in hyps if not h.finished]
        if not live:
            break
        rows = step_fn([h.tokens for h in live])
        for h, row in zip(live, rows):
            row = apply_no_repeat_ngram(h.tokens, no_repeat_ngram, row)
            if not np.isfinite(row).any():
                h.finished = True
                continue
            filt = top_k_top_p_filter(row, top_k, top_p)
            probs = np.exp(filt)
            tok = int(rng.choice(len(probs), p=probs / probs.sum()))
            h.tokens.append(tok)
            h.logprob += float(row[tok])
            if tok == eos_id or t == max_new_tokens - 1:
                h.finished = True
    for h in hyps:
        h.finished = True
    return sorted(hyps, key=lambda h: h.score(length_penalty), reverse=True)


def decode_with_preset(step_fn: StepFn, preset: GenerationPreset, seed: int = 0,
                       eos_id: int = EOS) -> list[BeamHypothesis]:
    if preset.do_sample:
        return sample_search(step_fn, eos_id, preset.max_new_tokens, preset.beam_size, preset.top_k,
                             preset.top_p, preset.length_penalty, preset.no_repeat_ngram,
                             np.random.default_rng(seed))
    return beam_search(step_fn, eos_id, preset.max_new_tokens, preset.beam_size,
                       preset.length_penalty, preset.no_repeat_ngram)


# ---------------------------------------------------------------- model-facing API

@dataclass
class GenerationResult:
    text: str
    tokens: list[int]
    hypotheses: list[BeamHypothesis] = field(default_factory=list)


def generate(model, vision, prompt_ids: Sequence[int], preset: GenerationPreset, seed: int = 0,
             tokenizer: ByteTokenizer | None = None) -> GenerationResult:
    """Decode a response for ``prompt_ids`` given condensed ``vision`` tokens (or None)."""
    tokenizer = tokenizer or ByteTokenizer()
    prompt = list(prompt_ids)
    nv = 0 if vision is None else vision.shape[0]
    needed = model.sequence_length(nv, len(prompt) + preset.max_new_tokens)
    if needed > model.cfg.max_seq_len:
        raise ContextLengthError(
            f"prompt of {len(prompt)} ids plus {preset.max_new_tokens} new tokens (vision {nv}) "
            f"needs {needed} positions; max_seq_len is {model.cfg.max_seq_len}")

    def step_fn(prefixes):
        return model.next_token_logprobs(vision, [prompt + p for p in prefixes])

    hyps = decode_with_preset(step_fn, preset, seed, tokenizer.eos_id)
    best = hyps[0].tokens
    return GenerationResult(tokenizer.decode(best), best, hyps)


def generate_text(model, media, prompt: str, preset: GenerationPreset, seed: int = 0) -> str:
    tok = ByteTokenizer()
    vision = None if media is None else model.encode_media(media)
    return generate(model, vision, tok.encode(prompt, bos=True), preset, seed, tok).text


@dataclass
class ChatSession:
    """Multi-turn dialog over one image or clip; prompts use the dialog format of the training data."""

    model: object
    media: object = None
    history: list[tuple[str, str]] = field(default_factory=list)
    _vision: object = None

    def vision(self):
        if self.media is not None and self._vision is None:
            from . import autodiff as ad
            with ad.no_grad():
                self._vision = self.model.encode_media(self.media)
        return self._vision

    def reply(self, user: str, preset: GenerationPreset, seed: int = 0) -> str:
        tok = ByteTokenizer()
        prompt = tok.encode(format_dialog(self.history, user), bos=True)
        text = generate(self.model, self.vision(), prompt, preset, seed, tok).text
        self.history.append((user, text))
        return text


def describe_first(session: ChatSession, media, preset: GenerationPreset, enabled: bool = True,
                   seed: int = 0) -> ChatSession:
    """Insert a round-0 "Describe the image in detail" exchange before any user turn."""
    if session.history:
        raise ValueError("describe_first needs an empty session")
    if media is not None:
        session.media = media
        session._vision = None
    if enabled and session.media is not None:
        session.reply(DESCRIBE_PROMPT, preset, seed)
    return session
