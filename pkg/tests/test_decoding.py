import itertools
import json

import numpy as np
import pytest

from embfuse.autodiff import no_grad
from embfuse.decoding import (
    DecodeConfig,
    beam_search,
    decode_record,
    greedy_decode,
    greedy_decode_batch,
    step_distribution,
)
from embfuse.embedding import EOS, SOS, EmbeddingTable, Vocab
from embfuse.errors import ConfigError
from embfuse.objectives import FusionConfig
from embfuse.rnnlm import LMConfig, RNNLM
from embfuse.seq2seq import ModelConfig, Seq2Seq, init_params


def sharp_model(seed, vocab_size=4, scale=1.0):
    # a larger init scale gives peaked, well-separated step distributions
    cfg = ModelConfig(feat_dim=3, vocab_size=vocab_size, emb_dim=4, enc_hidden=4, dec_hidden=6, att_dim=4,
                      token_dim=3, proj_hidden=5, seed=seed)
    return Seq2Seq(cfg, init_params(cfg, scale=scale))


def table_for(seed, vocab_size=4, dim=4):
    return EmbeddingTable(np.random.default_rng(1000 + seed).normal(size=(vocab_size, dim)))


def step_logp(model, x, prefix, table, cfg):
    """Decode-time log distribution after feeding ``prefix``, one token at a time."""
    with no_grad():
        enc = model.encode_batch([x])
        state = model.init_decoder_state(enc)
        prev = SOS
        for tok in prefix:
            _, state = model.decoder_step([prev], state, enc)
            prev = tok
        out, _ = model.decoder_step([prev], state, enc)
        return np.log(step_distribution(out, table, cfg).data[0])


def exhaustive_best(model, x, table, cfg):
    """Arg-max over every EOS-terminated or length-capped sequence."""
    V = model.cfg.vocab_size
    others = [v for v in range(V) if v != EOS]
    candidates = []
    for n in range(cfg.max_len):
        for body in itertools.product(others, repeat=n):
            candidates.append(body + (EOS,))
    candidates.extend(itertools.product(others, repeat=cfg.max_len))
    best = None
    for seq in candidates:
        score = 0.0
        for t, tok in enumerate(seq):
            score += step_logp(model, x, seq[:t], table, cfg)[tok]
        key = (-score, seq)
        if best is None or key < best:
            best = key
    return best[1], -best[0]


@pytest.mark.parametrize("seed", range(8))
def test_wide_beam_is_exhaustive(seed):
    model = sharp_model(seed)
    table = table_for(seed)
    x = np.random.default_rng(seed).normal(size=(3, 3))
    cfg = DecodeConfig(beam=64, max_len=3, mode="fused" if seed % 2 else "baseline")
    tokens, score = exhaustive_best(model, x, table, cfg)
    top = beam_search(model, x, table, cfg)[0]
    assert top.tokens == tokens
    assert top.score == pytest.approx(score, abs=1e-10)


@pytest.mark.parametrize("mode", ["baseline", "fused"])
def test_beam_one_is_greedy(mode):
    for seed in range(5):
        model = sharp_model(seed, vocab_size=9, scale=0.5)
        table = table_for(seed, vocab_size=9)
        x = np.random.default_rng(seed).normal(size=(4, 3))
        cfg = DecodeConfig(beam=1, max_len=6, mode=mode)
        assert beam_search(model, x, table, cfg)[0].output == greedy_decode(model, x, table, cfg)


def test_greedy_batch_matches_single_utterances():
    model = sharp_model(2, vocab_size=9, scale=0.5)
    rng = np.random.default_rng(0)
    xs = [rng.normal(size=(n, 3)) for n in (5, 2, 7)]
    cfg = DecodeConfig(max_len=6)
    batched = greedy_decode_batch(model, xs, None, cfg)
    assert batched == [greedy_decode(model, x, None, cfg) for x in xs]


def test_eos_first_model_gives_empty_output():
    model = sharp_model(0, vocab_size=6)
    model.params["phi.b"].data = np.where(np.arange(6) == EOS, 50.0, 0.0)
    x = np.ones((2, 3))
    cfg = DecodeConfig(beam=4, max_len=5)
    assert greedy_decode(model, x, None, cfg) == []
    best = beam_search(model, x, None, cfg)[0]
    assert best.output == [] and best.finished


def test_hypotheses_are_ranked_and_capped():
    model = sharp_model(1, vocab_size=6, scale=0.5)
    x = np.random.default_rng(1).normal(size=(3, 3))
    hyps = beam_search(model, x, None, DecodeConfig(beam=5, max_len=4))
    assert len(hyps) <= 5
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)
    assert all(len(h.tokens) <= 4 for h in hyps)


def test_lm_weight_zero_ignores_the_lm():
    model = sharp_model(3, vocab_size=7, scale=0.5)
    lm = RNNLM(LMConfig(vocab_size=7, hidden=5, embed_dim=3, seed=1))
    for p in lm.parameters():
        p.data = p.data * 20.0
    x = np.random.default_rng(3).normal(size=(4, 3))
    cfg = DecodeConfig(beam=3, max_len=5, lm_weight=0.0)
    a = beam_search(model, x, None, cfg, lm=lm)
    b = beam_search(model, x, None, cfg)
    assert [(h.tokens, h.score) for h in a] == [(h.tokens, h.score) for h in b]


def test_shallow_fusion_score_is_additive():
    model = sharp_model(4, vocab_size=7, scale=0.5)
    lm = RNNLM(LMConfig(vocab_size=7, hidden=5, embed_dim=3, seed=2))
    x = np.random.default_rng(4).normal(size=(3, 3))
    cfg = DecodeConfig(beam=4, max_len=4, lm_weight=0.5)
    best = beam_search(model, x, None, cfg, lm=lm)[0]
    expected = 0.0
    lm_state = lm.initial_state(1)
    prev = SOS
    for t, tok in enumerate(best.tokens):
        am = step_logp(model, x, best.tokens[:t], None, cfg)[tok]
        lm_logp, lm_state = lm.score_step(lm_state, [prev])
        expected += am + 0.5 * lm_logp[0, tok]
        prev = tok
    assert best.score == pytest.approx(expected, abs=1e-12)


def test_step_distribution_modes():
    model = sharp_model(0, vocab_size=5)
    table = table_for(0, vocab_size=5)
    with no_grad():
        enc = model.encode_batch([np.ones((2, 3))])
        out, _ = model.decoder_step([SOS], model.init_decoder_state(enc), enc)
    base = step_distribution(out, table, DecodeConfig())
    assert base is out.p_phi
    fused = step_distribution(out, table, DecodeConfig(mode="fused", fusion=FusionConfig(0.1, 0.0)))
    np.testing.assert_array_equal(fused.data, out.p_phi.data)
    with pytest.raises(ConfigError):
        step_distribution(out, None, DecodeConfig(mode="fused"))


def test_decode_config_validation():
    for bad in (dict(beam=0), dict(max_len=0), dict(mode="reg"), dict(lm_weight=-1.0)):
        with pytest.raises(ConfigError):
            DecodeConfig(**bad)
    assert DecodeConfig().beam == 20


def test_decode_record_fields():
    model = sharp_model(5, vocab_size=6, scale=0.5)
    vocab = Vocab(["yes", "no"])
    hyp = beam_search(model, np.ones((3, 3)), None, DecodeConfig(beam=3, max_len=4), top_k=2)[0]
    rec = json.loads(decode_record("u1", hyp, vocab, verbose=True))
    assert set(rec) == {"utterance_id", "tokens", "text", "score", "top5"}
    assert rec["tokens"] == hyp.output
    assert len(rec["top5"]) == len(hyp.tokens)
    assert all(len(step) == 2 for step in rec["top5"])
    assert "top5" not in json.loads(decode_record("u1", hyp, vocab))
