import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefixmm.errors import ConfigError
from prefixmm.generation import (DESCRIBE_PROMPT, BeamHypothesis, ChatSession, GenerationPreset,
                                 apply_no_repeat_ngram, beam_search, decode_with_preset, describe_first,
                                 dump_presets, generate, get_preset, length_score, load_presets,
                                 sample_search, top_k_top_p_filter)
from prefixmm.model import ContextLengthError, ModelConfig, MultimodalModel
from prefixmm.vision import ImageTensor

TABLE = {
    "Image Description": (64, 5, 1.0, 1, -2.0, 2, False),
    "Open-VQA image": (64, 5, 1.0, 1, -2.0, 2, False),
    "Video Description": (128, 1, 0.9, 3, 1.0, 3, True),
    "Open-VQA video": (128, 3, 1.0, 1, -1.0, 3, False),
    "OwlEval Description": (128, 1, 0.9, 3, 1.0, 3, True),
    "OwlEval": (256, 3, 0.9, 3, 1.0, 3, True),
    "demo": (256, 3, 0.9, 3, 1.0, 3, True),
}
FIELDS = ("max_new_tokens", "beam_size", "top_p", "top_k", "length_penalty", "no_repeat_ngram", "do_sample")


def toy_step(vocab, seed, eos=None, eos_boost=0.0):
    """A deterministic random language model: logprobs depend on the whole prefix."""
    cache = {}

    def step(prefixes):
        rows = []
        for p in prefixes:
            key = tuple(p)
            if key not in cache:
                rng = np.random.default_rng([seed, len(key), *key])
                z = rng.normal(size=vocab) * 2
                if eos is not None:
                    z[eos] += eos_boost
                cache[key] = z - np.log(np.exp(z - z.max()).sum()) - z.max()
            rows.append(cache[key])
        return np.array(rows)
    return step


def brute_force(step, vocab, eos, max_new, lp):
    """Every finishable sequence: ends in EOS before max_new, or reaches max_new."""
    best = None
    for n in range(1, max_new + 1):
        for seq in itertools.product(range(vocab), repeat=n):
            if eos in seq[:-1]:
                continue
            if n < max_new and seq[-1] != eos:
                continue
            logp = sum(step([list(seq[:i])])[0][t] for i, t in enumerate(seq))
            s = length_score(logp, n, lp)
            if best is None or s > best[0]:
                best = (s, list(seq))
    return best


def reference_beam(step, eos, max_new, beam, lp):
    """Plain beam search without early stopping; EOS hypotheses leave the beam."""
    alive, finished = [([], 0.0)], []
    for t in range(max_new):
        cands = []
        for i, (toks, s) in enumerate(alive):
            row = step([toks])[0]
            cands += [(s + row[k], i, k) for k in range(len(row))]
        cands.sort(key=lambda c: (-c[0], c[1], c[2]))
        nxt = []
        for s, i, k in cands:
            toks = alive[i][0] + [k]
            if k == eos:
                finished.append((toks, s))
            else:
                nxt.append((toks, s))
                if len(nxt) == beam:
                    break
        alive = nxt
    finished += alive
    return max(finished, key=lambda h: length_score(h[1], len(h[0]), lp))


# ---------------------------------------------------------------- presets

@pytest.mark.parametrize("name", list(TABLE))
def test_preset_values(name):
    p = get_preset(name)
    assert tuple(getattr(p, f) for f in FIELDS) == TABLE[name]


def test_presets_roundtrip(tmp_path):
    presets = load_presets()
    assert set(presets) == set(TABLE)
    path = tmp_path / "p.yaml"
    path.write_text(dump_presets(presets))
    assert load_presets(path) == presets


def test_preset_validation_and_overrides():
    p = get_preset("demo")
    q = p.with_overrides(beam_size=7, top_p=None)
    assert q.beam_size == 7 and q.top_p == p.top_p
    for bad in (dict(beam_size=0), dict(top_p=0.0), dict(top_p=1.5), dict(top_k=0),
                dict(no_repeat_ngram=-1), dict(max_new_tokens=0)):
        with pytest.raises(ConfigError):
            p.with_overrides(**bad)
    with pytest.raises(ConfigError):
        get_preset("nope")


def test_preset_file_with_unknown_field(tmp_path):
    path = tmp_path / "p.yaml"
    path.write_text("presets:\n  x: {max_new_tokens: 4, beams: 2}\n")
    with pytest.raises(ConfigError):
        load_presets(path)


# ---------------------------------------------------------------- filters

def test_top_p_uniform_half_keeps_two():
    out = top_k_top_p_filter(np.zeros(4), k=4, p=0.5)
    assert np.isfinite(out).sum() == 2
    np.testing.assert_allclose(np.exp(out[np.isfinite(out)]), [0.5, 0.5])


def test_top_k_one_is_argmax():
    z = np.array([0.1, 2.0, -1.0, 1.9])
    out = top_k_top_p_filter(z, k=1, p=1.0)
    assert np.flatnonzero(np.isfinite(out)).tolist() == [1]
    assert out[1] == 0.0


def test_filter_identity_when_open():
    z = np.log(np.array([0.1, 0.2, 0.3, 0.4]))
    np.testing.assert_allclose(top_k_top_p_filter(z, k=4, p=1.0), z, atol=1e-12)


def test_top_k_then_top_p():
    z = np.log(np.array([0.5, 0.3, 0.15, 0.05]))
    out = top_k_top_p_filter(z, k=3, p=0.8)
    # k keeps the first three, renormalized to .526/.316/.158; p=.8 keeps two
    assert np.flatnonzero(np.isfinite(out)).tolist() == [0, 1]
    np.testing.assert_allclose(np.exp(out[:2]), [0.625, 0.375])


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=10), st.integers(1, 10), st.floats(0.05, 1.0))
def test_filter_is_a_distribution(z, k, p):
    out = top_k_top_p_filter(np.array(z), k, p)
    kept = np.isfinite(out)
    assert 1 <= kept.sum() <= min(k, len(z))
    assert abs(np.exp(out[kept]).sum() - 1) < 1e-9


def test_no_repeat_ngram_bans_completion():
    out = apply_no_repeat_ngram([0, 1, 0], 2, np.zeros(3))
    assert np.isneginf(out[1]) and np.isfinite(out[[0, 2]]).all()
    out = apply_no_repeat_ngram([0, 1, 2, 0, 1], 3, np.zeros(3))
    assert np.isneginf(out[2]) and np.isfinite(out[:2]).all()
    np.testing.assert_array_equal(apply_no_repeat_ngram([0, 1, 0], 0, np.zeros(3)), np.zeros(3))
    out = apply_no_repeat_ngram([2, 2], 1, np.zeros(3))
    assert np.isneginf(out[2])


def _ngrams(seq, n):
    return [tuple(seq[i:i + n]) for i in range(len(seq) - n + 1)]


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.integers(1, 3), st.booleans())
def test_no_repeated_ngram_in_outputs(seed, n, beam, sample):
    step = toy_step(4, seed)
    if sample:
        hyps = sample_search(step, 99, 10, beam, 4, 1.0, 1.0, n, np.random.default_rng(seed))
    else:
        hyps = beam_search(step, 99, 10, beam, 1.0, n)
    for h in hyps:
        grams = _ngrams(h.tokens, n)
        assert len(grams) == len(set(grams))


# ---------------------------------------------------------------- beam search

@pytest.mark.parametrize("lp", [-2.0, 0.0, 1.0])
@pytest.mark.parametrize("seed", range(10))
def test_wide_beam_equals_brute_force(seed, lp):
    step = toy_step(3, seed, eos=2, eos_boost=0.5)
    hyps = beam_search(step, 2, 3, 27, lp)
    score, seq = brute_force(step, 3, 2, 3, lp)
    assert hyps[0].tokens == seq
    assert hyps[0].score(lp) == pytest.approx(score, abs=1e-12)


@pytest.mark.parametrize("lp", [-2.0, 0.0, 1.0])
@pytest.mark.parametrize("seed", range(10))
def test_beam_two_matches_reference(seed, lp):
    step = toy_step(3, seed, eos=2)
    got = beam_search(step, 2, 4, 2, lp)[0]
    toks, logp = reference_beam(step, 2, 4, 2, lp)
    assert got.tokens == toks
    assert got.logprob == pytest.approx(logp, abs=1e-12)


def test_beam_two_frozen_case():
    # frozen result of the reference oracle for this toy model
    step = toy_step(3, 7, eos=2)
    got = beam_search(step, 2, 4, 2, 1.0)[0]
    toks, logp = reference_beam(step, 2, 4, 2, 1.0)
    assert (got.tokens, round(got.logprob, 10)) == (toks, round(logp, 10))


def test_eos_does_not_take_beam_slots():
    # EOS is the single best first token; with beam 1 the live beam must still hold a non-EOS token
    table = {(): np.log([0.4, 0.1, 0.5]), (0,): np.log([1e-9, 1e-9, 1 - 2e-9])}

    def step(prefixes):
        return np.array([table.get(tuple(p), np.log([0.1, 0.1, 0.8])) for p in prefixes])

    hyps = beam_search(step, 2, 3, 1, 1.0)
    assert [h.tokens for h in hyps][:2] == [[0, 2], [2]]


def test_length_penalty_sign():
    short = BeamHypothesis([1, 2], -4.0, True)
    long = BeamHypothesis([1, 2, 3, 4], -4.0, True)
    # score = logprob / len ** lp
    assert short.score(-2.0) == -16.0 and long.score(-2.0) == -64.0
    assert short.score(-2.0) > long.score(-2.0)
    assert long.score(1.0) > short.score(1.0)
    assert long.score(0.0) == short.score(0.0)


def test_beam_respects_max_new_tokens():
    step = toy_step(5, 0, eos=4, eos_boost=-50)
    for h in beam_search(step, 4, 6, 3, 1.0):
        assert len(h.tokens) == 6 and 4 not in h.tokens


def test_degenerate_distribution():
    def step(prefixes):
        row = np.full(4, -np.inf)
        row[1 if len(prefixes[0]) < 3 else 3] = 0.0
        return np.tile(row, (len(prefixes), 1))
    hyps = beam_search(step, 3, 10, 4, 1.0)
    assert hyps[0].tokens == [1, 1, 1, 3] and hyps[0].logprob == 0.0
    s = sample_search(step, 3, 10, 2, 3, 0.9, 1.0, 0, np.random.default_rng(0))
    assert all(h.tokens == [1, 1, 1, 3] for h in s)


def test_sampling_is_seeded():
    step = toy_step(6, 1, eos=5)
    p = get_preset("demo").with_overrides(max_new_tokens=12)
    a = [h.tokens for h in decode_with_preset(step, p, seed=4, eos_id=5)]
    b = [h.tokens for h in decode_with_preset(step, p, seed=4, eos_id=5)]
    c = [h.tokens for h in decode_with_preset(step, p, seed=5, eos_id=5)]
    assert a == b and a != c
    assert len(a) == 3


def test_sampling_never_leaves_the_top_k():
    step = toy_step(8, 2)
    rng = np.random.default_rng(0)
    for h in sample_search(step, 99, 8, 5, 2, 1.0, 1.0, 0, rng):
        for i, tok in enumerate(h.tokens):
            row = step([h.tokens[:i]])[0]
            assert tok in np.argsort(-row)[:2]


# ---------------------------------------------------------------- model-facing

TINY = dict(d_model=32, n_layers=2, n_heads=2, d_vision=16, vision_heads=2, resampler_heads=2,
            n_queries=4, max_seq_len=64, vision_grid=(2, 2))


def test_generate_checks_context():
    model = MultimodalModel(ModelConfig(**TINY))
    v = model.encode_media(ImageTensor(np.zeros((3, 28, 28), np.float32)))
    with pytest.raises(ContextLengthError):
        generate(model, v, [257] * 10, get_preset("Open-VQA image"))
    out = generate(model, v, [257, 65], get_preset("Open-VQA image").with_overrides(max_new_tokens=8))
    assert len(out.tokens) <= 8 and out.hypotheses


def test_describe_first_inserts_round_zero():
    model = MultimodalModel(ModelConfig(**{**TINY, "max_seq_len": 128}))
    img = ImageTensor(np.zeros((3, 28, 28), np.float32))
    preset = get_preset("Image Description").with_overrides(max_new_tokens=6, beam_size=2)
    s = describe_first(ChatSession(model), img, preset)
    assert len(s.history) == 1 and s.history[0][0] == DESCRIBE_PROMPT
    s.reply("What color?", preset)
    assert [u for u, _ in s.history] == [DESCRIBE_PROMPT, "What color?"]
    off = describe_first(ChatSession(model), img, preset, enabled=False)
    assert off.history == []
    with pytest.raises(ValueError):
        describe_first(s, img, preset)
