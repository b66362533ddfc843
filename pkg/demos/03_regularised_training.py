"""
Baseline, regularised and fused training side by side
=====================================================

The same attention model is trained three ways on the synthetic task:

* baseline: cross-entropy on P_phi only
* reg: cross-entropy plus lambda * (1 - cos(e_tilde, e_y)), lambda = 10
* fused: -log of (1 - lambda_f) P_phi + lambda_f P_theta plus the same
  regulariser, where P_theta is a cosine softmax against the frozen table

This is one seed and fewer epochs than the acceptance run, so expect noise.
Takes a few minutes on one core.
"""

import numpy as np

from embfuse.corpus import SyntheticTaskSpec, generate_synthetic_task
from embfuse.embedding import EmbedTrainConfig
from embfuse.pipeline import embed_corpus
from embfuse.seq2seq import ModelConfig, Seq2Seq
from embfuse.training import TrainConfig, projection_cosines, random_pair_cosines, train_asr

spec = SyntheticTaskSpec()
task = generate_synthetic_task(spec)
vocab, table = embed_corpus(task.text, EmbedTrainConfig())
digest = table.digest()

results = {}
for mode in ("baseline", "reg", "fused"):
    model = Seq2Seq(ModelConfig(feat_dim=spec.feature_dim, vocab_size=len(vocab)))
    res = train_asr(model, task.train, task.dev, vocab, table, mode, cfg=TrainConfig(learning_rate=0.3, epochs=25))
    results[mode] = (model, res)
    print("%-8s best dev WER %.1f%% at epoch %d" % (mode, 100 * res.best_dev_wer, res.best_epoch))

# the table is read, never written
assert table.digest() == digest

# how well does the projection land on the target embedding?
for mode in ("baseline", "reg"):
    model = results[mode][0]
    aligned = projection_cosines(model, task.dev, vocab, table).mean()
    shuffled = random_pair_cosines(model, task.dev, vocab, table).mean()
    print("%-8s mean cos to target %.2f, to a random word %.2f" % (mode, aligned, shuffled))

# learning curves, dev WER per epoch
for mode, (_, res) in results.items():
    print(mode, " ".join("%.2f" % h["dev_wer"] for h in res.history))
