"""
A pseudo-speech task with a text side
=====================================

Each word of a 50-word vocabulary owns a prototype feature vector. An
utterance is a sentence drawn from a sparse Markov chain, and every word is
rendered as one to three noisy copies of its prototype. A larger text-only
corpus comes from the same chain; it is what the embeddings and the language
model get to read.
"""

import numpy as np

from embfuse.corpus import SyntheticTaskSpec, bigram_entropy, generate_synthetic_task

spec = SyntheticTaskSpec()
task = generate_synthetic_task(spec)
print(spec)

# sizes of the three parts
print(len(task.train), "train utterances,", len(task.dev), "dev,", len(task.text), "text sentences")

# one utterance: frames of features and the words they came from
u = task.train[0]
print(u.utterance_id, repr(u.text), "->", u.features.shape[0], "frames of dim", u.features.shape[1])

# the chain is sparse, so text is fairly predictable
print("bigram entropy of the text corpus: %.2f nats (uniform would be %.2f)"
      % (bigram_entropy(task.text), np.log(spec.vocab_size - 1)))

# the few likely successors of one word
w = 0
top = np.argsort(task.transitions[w])[::-1][:5]
print("after", task.words[w], ":", [(task.words[j], round(float(task.transitions[w, j]), 2)) for j in top])

# noise is what makes recognition hard: classify single noisy frames by the
# nearest prototype to see how ambiguous one frame is on its own
rng = np.random.default_rng(0)
ids = rng.integers(0, spec.vocab_size, size=5000)
frames = task.prototypes[ids] + rng.normal(scale=spec.noise, size=(5000, spec.feature_dim))
dists = ((frames[:, None, :] - task.prototypes[None]) ** 2).sum(-1)
print("single-frame nearest-prototype error: %.1f%%" % (100 * np.mean(dists.argmin(1) != ids)))
