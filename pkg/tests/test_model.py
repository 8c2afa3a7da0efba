import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefixmm import autodiff as ad
from prefixmm.model import (ConfigMismatchError, ContextLengthError, Decoder, ModelConfig,
                            MultimodalModel, build_adapter, check_model_card, write_model_card)
from prefixmm.errors import ConfigError
from prefixmm.vision import ImageTensor

TINY = dict(d_model=32, n_layers=2, n_heads=2, d_vision=16, vision_heads=2, resampler_heads=2,
            n_queries=4, max_seq_len=64, dtype="float64")


def tiny(**kw):
    return MultimodalModel(ModelConfig(**{**TINY, **kw}))


# independent numpy reference of the base decoder (no adapters, no vision)

def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _attn(x, att, h):
    n, d = x.shape
    dh = d // h
    q = (x @ att.q.weight.data).reshape(n, h, dh).transpose(1, 0, 2)
    k = (x @ att.k.weight.data).reshape(n, h, dh).transpose(1, 0, 2)
    v = (x @ att.v.weight.data).reshape(n, h, dh).transpose(1, 0, 2)
    s = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    s = np.where(np.tril(np.ones((n, n), bool)), s, -np.inf)
    w = np.exp(s - s.max(-1, keepdims=True))
    w /= w.sum(-1, keepdims=True)
    ctx = (w @ v).transpose(1, 0, 2).reshape(n, d)
    return ctx @ att.out.weight.data + att.out.bias.data


def reference_logits(model, ids):
    dec = model.decoder
    x = dec.tok_embed.data[ids] + dec.pos_embed.data[:len(ids)]
    for blk in dec.blocks:
        x = x + _attn(_ln(x, blk.ln1.gain.data, blk.ln1.bias.data), blk.attn, model.cfg.n_heads)
        hdn = _ln(x, blk.ln2.gain.data, blk.ln2.bias.data) @ blk.ffn.up.weight.data + blk.ffn.up.bias.data
        hdn = hdn / (1 + np.exp(-hdn))
        x = x + hdn @ blk.ffn.down.weight.data + blk.ffn.down.bias.data
    return _ln(x, dec.ln_f.gain.data, dec.ln_f.bias.data) @ dec.head.weight.data


def test_text_only_forward_matches_numpy_reference():
    model = tiny()
    ids = [257, 72, 105, 33, 10]
    with ad.no_grad():
        got = model.forward([None], [ids], use_adapters=False).logits.data[0]
    np.testing.assert_allclose(got, reference_logits(model, ids), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_zero_init_adapters_are_identity(seed):
    model = tiny(seed=seed)
    rng = np.random.default_rng(seed)
    vision = ad.Tensor(rng.standard_normal((4, 32)))
    ids = list(rng.integers(0, 256, size=7))
    with ad.no_grad():
        a = model.forward([vision], [ids]).logits.data
        b = model.forward([vision], [ids], use_adapters=False).logits.data
    assert np.max(np.abs(a - b)) <= 1e-6


def test_adapter_changes_output_once_up_is_nonzero():
    model = tiny()
    up = model.decoder.adapters[0].up.weight
    up.data[:] = np.random.default_rng(0).standard_normal(up.shape) * 0.1
    with ad.no_grad():
        a = model.forward([None], [[1, 2, 3]]).logits.data
        b = model.forward([None], [[1, 2, 3]], use_adapters=False).logits.data
    assert np.max(np.abs(a - b)) > 1e-3


def test_build_adapter_shapes():
    cfg = ModelConfig(d_model=64)
    ad_ = build_adapter(cfg)
    assert ad_.down.weight.shape == (64, 32)
    assert ad_.up.weight.shape == (32, 64)
    assert not ad_.up.weight.data.any()
    x = ad.Tensor(np.random.default_rng(0).standard_normal((3, 64)).astype(np.float32))
    np.testing.assert_array_equal(ad_(x).data, x.data)


def test_empty_vision_equals_text_only():
    model = tiny()
    ids = [257, 5, 6, 7]
    with ad.no_grad():
        packed = model.forward([None], [ids])
    assert packed.text_start == [0] and packed.vision_len == [0]
    np.testing.assert_allclose(packed.logits.data[0], reference_logits(model, ids), atol=1e-10)


def test_prefix_layout_and_media_boundary():
    model = tiny()
    v = ad.Tensor(np.ones((4, 32)))
    with ad.no_grad():
        p = model.forward([v, None], [[1, 2, 3], [1, 2]])
    assert p.text_start == [5, 0]
    assert p.lengths == [8, 2]
    assert p.logits.shape == (2, 8, model.cfg.vocab_size)


def test_batch_padding_does_not_change_rows():
    model = tiny()
    with ad.no_grad():
        both = model.forward([None, None], [[1, 2, 3, 4, 5], [9, 8]]).logits.data
        solo = model.forward([None], [[9, 8]]).logits.data
    np.testing.assert_allclose(both[1, :2], solo[0], atol=1e-10)


def test_causality_exhaustive_probe():
    # changing a token never changes logits at earlier positions
    model = tiny()
    base = [257, 10, 20, 30, 40, 50, 60, 70]
    v = ad.Tensor(np.random.default_rng(1).standard_normal((4, 32)))
    with ad.no_grad():
        ref = model.forward([v], [base]).logits.data[0]
        for pos in range(len(base)):
            alt = list(base)
            alt[pos] = (alt[pos] + 1) % 256
            out = model.forward([v], [alt]).logits.data[0]
            t = 5 + pos
            np.testing.assert_array_equal(out[:t], ref[:t])
            assert np.abs(out[t:] - ref[t:]).max() > 0


def test_bidirectional_prefix_lets_vision_see_itself():
    model = tiny(bidirectional_prefix=True)
    rng = np.random.default_rng(0)
    v = rng.standard_normal((4, 32))
    v2 = v.copy()
    v2[3] += 1.0
    with ad.no_grad():
        a = model.forward([ad.Tensor(v)], [[1, 2]]).logits.data[0]
        b = model.forward([ad.Tensor(v2)], [[1, 2]]).logits.data[0]
    assert np.abs(a[0] - b[0]).max() > 0


def test_batch_and_incremental_logprob_agree():
    model = tiny()
    v = model.encode_media(ImageTensor(np.random.default_rng(0).random((3, 28, 28))))
    ctx, resp = [257, 65, 66], [67, 68, 69, 258]
    a = model.sequence_logprob(v, ctx, resp)
    b = model.sequence_logprob(v, ctx, resp, incremental=True)
    assert abs(a - b) <= 1e-6
    assert a < 0


def test_text_only_scoring_needs_context():
    with pytest.raises(ValueError):
        tiny().sequence_logprob(None, [], [1])


def test_context_length_error_reports_sizes():
    model = tiny(max_seq_len=16)
    with pytest.raises(ContextLengthError, match="vision 4, text 12"):
        model.forward([ad.Tensor(np.zeros((4, 32)))], [list(range(12))])
    model.forward([None], [list(range(16))])


def test_prefix_trainable_set():
    model = tiny()
    names = {n for n, p in model.named_parameters() if not p.frozen}
    assert names, "nothing trainable"
    assert all(n.startswith(("decoder.adapters", "resampler", "decoder.media_embed")) for n in names)
    assert any(n.startswith("decoder.adapters") for n in names)
    assert any(n.startswith("resampler") for n in names)
    base = {id(p) for p in model.decoder.base_parameters()}
    assert all(p.frozen for p in model.parameters() if id(p) in base)
    assert all(p.frozen for p in model.vision.parameters())
    assert model.trainable_parameters() == [p for p in model.parameters() if not p.frozen]


def test_unfrozen_llm_and_vision_flags():
    model = tiny(llm_frozen=False, train_vision=True)
    assert all(not p.frozen for p in model.parameters())


def test_cross_mode_trainable_set():
    model = tiny(fusion_mode="cross_attention")
    names = {n for n, p in model.named_parameters() if not p.frozen}
    assert all(n.startswith(("decoder.xattn", "resampler")) for n in names)
    assert any(n.endswith("attn_gate") for n in names)


def test_cross_mode_zero_gates_ignore_vision():
    model = tiny(fusion_mode="cross_attention")
    ids = [257, 3, 4, 5]
    v = ad.Tensor(np.random.default_rng(0).standard_normal((4, 32)))
    with ad.no_grad():
        with_v = model.forward([v], [ids]).logits.data[0]
        without = model.forward([None], [ids]).logits.data[0]
    np.testing.assert_allclose(with_v, without, atol=1e-12)
    np.testing.assert_allclose(without, reference_logits(model, ids), atol=1e-10)


def test_cross_mode_open_gate_uses_vision_only_where_present():
    model = tiny(fusion_mode="cross_attention")
    for x in model.decoder.xattn:
        x.attn_gate.data[...] = 1.0
    rng = np.random.default_rng(0)
    v = ad.Tensor(rng.standard_normal((4, 32)))
    ids = [257, 3, 4]
    with ad.no_grad():
        mixed = model.forward([v, None], [ids, ids]).logits.data
        alone = model.forward([None], [ids]).logits.data[0]
    np.testing.assert_allclose(mixed[1], alone, atol=1e-10)
    assert np.abs(mixed[0] - alone).max() > 1e-4
    assert model.sequence_length(4, 3) == 3


def test_slots():
    cfg = ModelConfig(n_layers=6, adapter_interval=2, cross_attn_interval=3)
    assert Decoder.adapter_slots(cfg) == [1, 3, 5]
    assert Decoder.xattn_slots(cfg) == [0, 3]


@pytest.mark.parametrize("kw", [dict(d_model=30, n_heads=4), dict(adapter_bottleneck=128),
                                dict(fusion_mode="late"), dict(adapter_interval=0)])
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_model_card_roundtrip_and_mismatch(tmp_path):
    cfg = ModelConfig(**TINY)
    path = tmp_path / "model.card"
    write_model_card(cfg, path)
    assert ModelConfig.from_card(path.read_text()) == cfg
    check_model_card(cfg, path)
    with pytest.raises(ConfigMismatchError, match="d_model"):
        check_model_card(ModelConfig(**{**TINY, "d_model": 64}), path)
    path.write_text(path.read_text() + "bogus = 1\n")
    with pytest.raises(ConfigMismatchError, match="bogus"):
        ModelConfig.from_card(path.read_text())


@settings(max_examples=20)
@given(st.lists(st.integers(0, 259), min_size=1, max_size=12), st.integers(0, 3))
def test_next_token_logprobs_normalized(ids, nv):
    model = _shared()
    v = ad.Tensor(np.ones((nv, 32))) if nv else None
    lp = model.next_token_logprobs(v, [ids])
    assert lp.shape == (1, 260)
    assert abs(np.exp(lp).sum() - 1) < 1e-9


_MODEL = []


def _shared():
    if not _MODEL:
        _MODEL.append(tiny())
    return _MODEL[0]
