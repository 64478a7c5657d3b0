import math

import numpy as np
import pytest

from greenplm import autograd as ag
from greenplm.autograd import DimensionError, Tensor
from greenplm.model import (DecoderConfig, LoraAdapter, Projector, ToyDecoder, build_batch, generate,
                            llm_forward, lora_forward, single_turn_segments)
from greenplm.tokenizer import Tokenizer

from oracles import ce_reference, decoder_reference

TEXTS = ["A small red cube.", "What is this?", "This is an object of", "a large blue torus with a lid"]


@pytest.fixture()
def f64():
    with ag.default_dtype(np.float64):
        yield


def _decoder(V=11, E=8, layers=2, heads=2, context=16, seed=0, pos="learned"):
    return ToyDecoder(DecoderConfig(V, E, layers, heads, context, seed=seed, pos=pos))


# -- projector ---------------------------------------------------------------------

def test_projector_shapes():
    p = Projector(64, 128)
    assert p(np.zeros((36, 64))).shape == (36, 128)
    assert p(np.zeros((2, 36, 64))).shape == (2, 36, 128)
    with pytest.raises(DimensionError):
        p(np.zeros((36, 63)))


def test_projector_zero_weights_zero_output():
    p = Projector(4, 6)
    for t in p.parameters().values():
        t.data[...] = 0
    assert np.all(p(np.ones((3, 4))).data == 0)


def test_projector_is_tokenwise(f64):
    p = Projector(5, 7, seed=3)
    x = np.random.default_rng(0).normal(size=(36, 5))
    full = p(x).data
    one = np.stack([p(x[i:i + 1]).data[0] for i in range(36)])
    np.testing.assert_allclose(full, one, atol=1e-12)


def test_projector_gradient(f64):
    p = Projector(5, 6, seed=1)
    x = np.random.default_rng(1).normal(size=(4, 5))
    w = np.random.default_rng(2).normal(size=(4, 6))
    for t in p.parameters().values():
        assert ag.grad_check(lambda: (p(x) * Tensor(w)).sum(), t) < 1e-4


# -- LoRA --------------------------------------------------------------------------

def test_lora_zero_init_is_exact():
    rng = np.random.default_rng(0)
    W, x = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
    ad = LoraAdapter(5, 6, rank=2, alpha=4.0)
    np.testing.assert_array_equal(lora_forward(x, W, ad).data, lora_forward(x, W, None).data)


def test_lora_merge_matches(f64):
    rng = np.random.default_rng(1)
    W, x = rng.normal(size=(6, 5)), rng.normal(size=(3, 5))
    ad = LoraAdapter(5, 6, rank=3, alpha=6.0)
    ad.B.data = rng.normal(size=(6, 3))
    y = lora_forward(x, W, ad).data
    np.testing.assert_allclose(y, x @ ad.merged(W).T, atol=1e-6)
    np.testing.assert_allclose(y, x @ W.T + 2.0 * x @ ad.A.data.T @ ad.B.data.T, atol=1e-12)


def test_lora_alpha_zero_is_base(f64):
    rng = np.random.default_rng(2)
    W, x = rng.normal(size=(4, 4)), rng.normal(size=(2, 4))
    ad = LoraAdapter(4, 4, rank=2, alpha=0.0)
    ad.B.data = rng.normal(size=(4, 2))
    np.testing.assert_allclose(lora_forward(x, W, ad).data, x @ W.T, atol=1e-15)


def test_lora_rank_too_large():
    with pytest.raises(ValueError):
        LoraAdapter(4, 8, rank=5)


def test_decoder_lora_zero_init_and_merge(f64):
    dec = _decoder()
    x = np.random.default_rng(0).normal(size=(2, 6, 8))
    base = dec.forward_embeds(Tensor(x)).data
    dec.attach_lora(rank=2, alpha=4.0)
    np.testing.assert_allclose(dec.forward_embeds(Tensor(x)).data, base, atol=1e-6)
    rng = np.random.default_rng(1)
    for ad in dec.lora.values():
        ad.B.data = rng.normal(0, 0.3, ad.B.shape)
    adapted = dec.forward_embeds(Tensor(x)).data
    assert np.abs(adapted - base).max() > 1e-3
    for key, ad in dec.lora.items():
        dec.params[key].data = ad.merged(dec.params[key].data)
    dec.detach_lora()
    np.testing.assert_allclose(dec.forward_embeds(Tensor(x)).data, adapted, atol=1e-6)


# -- decoder -------------------------------------------------------------------------

@pytest.mark.parametrize("pos", ["learned", "rope", "none"])
def test_causality(pos, f64):
    dec = _decoder(pos=pos, seed=4)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 10, 8))
    base = dec.forward_embeds(Tensor(x)).data
    for t in range(9):
        y = x.copy()
        y[:, t + 1:] = rng.normal(size=y[:, t + 1:].shape)
        out = dec.forward_embeds(Tensor(y)).data
        np.testing.assert_allclose(out[:, :t + 1], base[:, :t + 1], atol=1e-10)
        assert np.abs(out[:, t + 1:] - base[:, t + 1:]).max() > 1e-6


def test_context_overflow():
    dec = _decoder(context=4)
    with pytest.raises(ValueError, match="context"):
        dec.forward_embeds(Tensor(np.zeros((1, 5, 8))))


def test_uniform_logits_loss_is_log_v():
    V = 37
    loss = ag.cross_entropy(Tensor(np.zeros((2, 5, V))), np.zeros((2, 5), dtype=int))
    assert abs(loss.item() - math.log(V)) < 1e-6


def test_uniform_head_loss_is_log_v(f64):
    dec = _decoder(V=13)
    dec.params["tok_emb"].data[...] = 0.0
    batch = build_batch([[([1, 2], False), ([3, 4], True)]], prefix_len=2)
    _, loss = llm_forward(dec, Tensor(np.ones((1, 2, 8))), batch)
    assert abs(loss.item() - math.log(13)) < 1e-12


def test_two_token_loss_matches_reference(f64):
    dec = _decoder(V=9, E=4, layers=1, heads=1, context=8, seed=3)
    prefix = np.random.default_rng(7).normal(size=(1, 2, 4))
    segs = [([5, 1], False), ([7, 2], True)]   # two answer tokens
    batch = build_batch([segs], prefix_len=2)
    _, loss = llm_forward(dec, Tensor(prefix), batch)
    params = {k[len("decoder."):]: t.data for k, t in dec.parameters().items()}
    ids = [5, 1, 7, 2]
    x = np.concatenate([prefix[0], params["tok_emb"][ids]])
    logits = decoder_reference(params, dec.cfg, x)
    # logits at position p predict token p + 1 of [prefix, ids]; targets are 7 and 2
    targets = [0, 0, 0, 7, 2, 0]
    mask = [0, 0, 0, 1, 1, 0]
    ref = ce_reference(logits, targets, mask)
    assert abs(loss.item() - ref) < 1e-10


def test_batch_masks_only_targets():
    b = build_batch([[([3, 4], False), ([5, 6], True)], [([3], False), ([9], True)]], prefix_len=1)
    assert b.ids.tolist() == [[3, 4, 5, 6], [3, 9, 0, 0]]
    assert b.mask.tolist() == [[False, False, True, True, False], [False, True, False, False, False]]
    assert b.targets[0, 2] == 5 and b.targets[0, 3] == 6 and b.targets[1, 1] == 9


def test_base_weights_get_no_gradient():
    dec = _decoder()
    dec.attach_lora(rank=2)
    batch = build_batch([[([1], False), ([2, 3], True)]], prefix_len=1)
    prefix = Tensor(np.ones((1, 1, 8)), requires_grad=True)
    _, loss = llm_forward(dec, prefix, batch)
    loss.backward()
    assert all(t.grad is None for t in dec.parameters().values())
    assert all(t.grad is not None for t in dec.lora_parameters().values())
    assert prefix.grad is not None


# -- tokenizer / generation ---------------------------------------------------------

def test_tokenizer_round_trip():
    tok = Tokenizer.build(TEXTS)
    for s in TEXTS + ["unseen words, still fine: 42!"]:
        assert tok.decode(tok.encode(s)) == s
    assert (tok.pad_id, tok.bos_id, tok.eos_id, tok.sep_id) == (0, 1, 2, 3)


def test_tokenizer_round_trip_on_corpus(tiny_corpus):
    tok = tiny_corpus.tokenizer
    for name in ("stage1", "stage2", "stage3", "eval"):
        for r in tiny_corpus.records(name):
            for s in [r.caption, *[x for qa in r.qa for x in qa]]:
                assert tok.decode(tok.encode(s)) == s


def test_tokenizer_save_load(tmp_path):
    tok = Tokenizer.build(TEXTS)
    tok.save(tmp_path / "t.json")
    again = Tokenizer.load(tmp_path / "t.json")
    assert again.encode(TEXTS[0]) == tok.encode(TEXTS[0])


def test_generate_is_deterministic():
    tok = Tokenizer.build(TEXTS)
    dec = _decoder(V=tok.vocab_size, E=16, context=40)
    prefix = np.random.default_rng(0).normal(size=(3, 2, 16))
    a = generate(dec, tok, prefix, "What is this?", max_len=6)
    assert a == generate(dec, tok, prefix, "What is this?", max_len=6)
    assert len(a) == 3
    assert generate(dec, tok, prefix, "What is this?", max_len=0) == ["", "", ""]


def test_single_turn_segments():
    tok = Tokenizer.build(TEXTS)
    segs = single_turn_segments(tok, "What is this?", "a cube")
    assert segs[0][1] is False and segs[1][1] is True
    assert segs[1][0][-1] == tok.eos_id
