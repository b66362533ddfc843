import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embfuse import autodiff as ad
from embfuse.autodiff import Tensor
from embfuse.embedding import EOS, SOS
from embfuse.errors import ConfigError, DataError, TokenLookupError
from embfuse.rnnlm import LMConfig, RNNLM, lm_score_step, lm_train, load_lm, perplexity, save_lm


def small_lm(V=7, seed=0, **kw):
    return RNNLM(LMConfig(vocab_size=V, hidden=6, embed_dim=4, seed=seed, **kw))


def test_zero_weights_give_uniform_prediction():
    lm = small_lm()
    for p in lm.parameters():
        p.data = np.zeros(p.shape)
    logp, _ = lm.score_step(lm.initial_state(), [SOS])
    np.testing.assert_allclose(logp, -math.log(7), atol=1e-15)
    assert perplexity(lm, [[4, 5, 6]]) == pytest.approx(7.0, rel=1e-12)


def test_sequence_nll_by_hand():
    lm = small_lm(seed=3)
    sentence = [4, 6, 5]
    nll, count = lm.sequence_nll([sentence])
    state = lm.initial_state()
    expected = 0.0
    for prev, nxt in zip([SOS] + sentence, sentence + [EOS]):
        logp, state = lm.score_step(state, [prev])
        expected -= logp[0, nxt]
    assert count == 4
    assert nll.item() == pytest.approx(expected, abs=1e-12)
    # SOS and EOS markers on the input are stripped
    assert lm.sequence_nll([[SOS] + sentence + [EOS]])[0].item() == nll.item()


def test_chained_steps_match_batched_frames():
    lm = small_lm(seed=1)
    sents = [[4, 5], [6, 6, 4, 5]]
    together, n = lm.sequence_nll(sents)
    apart = sum(lm.sequence_nll([s])[0].item() for s in sents)
    assert n == 3 + 5
    assert together.item() == pytest.approx(apart, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=6), st.integers(0, 5))
def test_step_is_a_distribution(prefix, seed):
    lm = small_lm(seed=seed)
    state = lm.initial_state()
    for tok in prefix:
        logp, state = lm_score_step(lm, state, tok)
        assert isinstance(logp, Tensor)
        assert abs(np.exp(logp.data).sum() - 1.0) < 1e-12


def test_perplexity_bounds():
    lm = small_lm(seed=2)
    rng = np.random.default_rng(0)
    corpus = [list(rng.integers(4, 7, size=5)) for _ in range(10)]
    assert perplexity(lm, corpus) >= 1.0
    with pytest.raises(DataError):
        perplexity(lm, [])


def test_deterministic_chain_is_learned():
    corpus = [[4, 5] * 6 for _ in range(40)]
    cfg = LMConfig(vocab_size=6, hidden=16, embed_dim=8, epochs=50, batch_size=8, seed=0)
    lm, history = lm_train(corpus, cfg)
    assert history[-1] < 1.2
    assert history[1] < history[0]


def test_uniform_source_stays_near_vocab_size():
    # long sentences of 5 equiprobable words; EOS adds a little on top of 5
    rng = np.random.default_rng(0)
    corpus = [list(rng.integers(4, 9, size=40)) for _ in range(200)]
    dev = [list(rng.integers(4, 9, size=40)) for _ in range(50)]
    lm, history = lm_train(corpus, LMConfig(vocab_size=9, hidden=8, embed_dim=4, epochs=6), dev=dev)
    assert abs(history[-1] - 5.0) / 5.0 < 0.15


def test_training_is_deterministic_and_logs():
    corpus = [[4, 5, 6], [6, 5, 4, 4]] * 5
    cfg = LMConfig(vocab_size=7, hidden=5, embed_dim=3, epochs=2, batch_size=4)
    records = []
    lm1, h1 = lm_train(corpus, cfg, log=records.append)
    lm2, h2 = lm_train(corpus, cfg)
    assert h1 == h2
    for name in lm1.params:
        np.testing.assert_array_equal(lm1.params[name].data, lm2.params[name].data)
    assert [r["epoch"] for r in records] == [1, 2]
    assert records[-1]["perplexity"] == h1[-1]


def test_errors():
    with pytest.raises(DataError):
        lm_train([], LMConfig(vocab_size=5))
    with pytest.raises(ConfigError):
        LMConfig(vocab_size=5, hidden=0).validate()
    with pytest.raises(ConfigError):
        LMConfig(vocab_size=5, learning_rate=0.0).validate()
    with pytest.raises(ConfigError):
        LMConfig.from_dict({"vocab_size": 5, "depth": 2})
    with pytest.raises(TokenLookupError):
        small_lm().step([7], small_lm().initial_state())


def test_save_load_round_trip(tmp_path):
    lm = small_lm(seed=4)
    lm.vocab_hash = "abc"
    save_lm(tmp_path / "lm.json", lm, vocab=["x"])
    back = load_lm(tmp_path / "lm.json")
    assert back.vocab_hash == "abc"
    assert back.cfg == lm.cfg
    for name, p in lm.params.items():
        np.testing.assert_array_equal(p.data, back.params[name].data)
    (tmp_path / "bad.json").write_text('{"kind": "seq2seq"}')
    with pytest.raises(DataError):
        load_lm(tmp_path / "bad.json")


def test_gradients_of_sequence_nll():
    lm = small_lm(V=6, seed=5)
    # default init leaves recurrent gradients near 1e-9, below what central
    # differences resolve; larger weights keep every entry measurable
    for p in lm.parameters():
        p.data = np.random.default_rng(6).uniform(-1.0, 1.0, size=p.shape)
    sents = [[4, 5, 4], [5]]
    worst, _ = ad.grad_check_params(lambda: lm.sequence_nll(sents)[0], lm.parameters(), eps=1e-5)
    assert worst < 1e-4
