"""
Beam search, fusion and a language model
========================================

A baseline model is decoded with beam search, then with shallow fusion of an
RNN language model trained on the text corpus (score = log P + beta log P_LM).
A very predictable chain makes the language model worth listening to.
"""

from embfuse.corpus import SyntheticTaskSpec, generate_synthetic_task
from embfuse.decoding import DecodeConfig, beam_search
from embfuse.pipeline import corpus_ids, embed_corpus
from embfuse.embedding import EmbedTrainConfig
from embfuse.rnnlm import LMConfig, lm_train
from embfuse.seq2seq import ModelConfig, Seq2Seq
from embfuse.training import TrainConfig, evaluate_wer, train_asr

spec = SyntheticTaskSpec(concentration=0.01, noise=1.0, num_dev=100, seed=9)
task = generate_synthetic_task(spec)
vocab, _ = embed_corpus(task.text, EmbedTrainConfig(dim=8, epochs=1))

model = Seq2Seq(ModelConfig(feat_dim=spec.feature_dim, vocab_size=len(vocab)))
train_asr(model, task.train, task.dev, vocab, None, "baseline", cfg=TrainConfig(learning_rate=0.3, epochs=20))

lm, ppl = lm_train(corpus_ids(task.text, vocab), LMConfig(vocab_size=len(vocab), epochs=8))
print("LM perplexity by epoch:", " ".join("%.2f" % p for p in ppl))

# one utterance, top hypotheses with and without the LM
u = task.dev[0]
print("reference:", u.text)
for beta in (0.0, 0.5):
    hyps = beam_search(model, u.features, None, DecodeConfig(beam=8, max_len=13, lm_weight=beta), lm=lm)
    for h in hyps[:3]:
        print("  beta=%.1f  %7.2f  %s" % (beta, h.score, " ".join(vocab.token(t) for t in h.output)))

# dev WER as the LM weight grows
for beta in (0.0, 0.1, 0.3, 0.5, 1.0):
    report, _ = evaluate_wer(model, task.dev, vocab, None, DecodeConfig(beam=8, max_len=13, lm_weight=beta),
                             lm=lm, use_beam=True)
    print("beta %.1f  dev WER %.1f%%" % (beta, 100 * report.wer))
