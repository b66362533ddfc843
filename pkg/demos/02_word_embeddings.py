"""
Embeddings from text alone
==========================

Skip-gram with negative sampling, trained on the text-only corpus of the
synthetic task. Words that share neighbours in the chain end up close, which
is the structure the regulariser later pushes the decoder towards.
"""

from collections import Counter

import numpy as np

from embfuse.corpus import SyntheticTaskSpec, generate_synthetic_task
from embfuse.embedding import EmbedTrainConfig, nearest_neighbors
from embfuse.pipeline import embed_corpus

task = generate_synthetic_task(SyntheticTaskSpec())
vocab, table = embed_corpus(task.text, EmbedTrainConfig(mode="skipgram", dim=32, epochs=5))
print(table.size, "rows of dim", table.dim)

# with a peaked chain some words never occur; they map to <unk>
counts = Counter(w for line in task.text for w in line.split())
seen = [w for w in task.words if counts[w] > 0]
print(len(seen), "of", len(task.words), "words occur in the text")

# nearest neighbours of the most frequent words, reserved rows skipped
for word, n in counts.most_common(3):
    near = [(i, c) for i, c in nearest_neighbors(table, vocab.id(word), 8) if i >= 4][:4]
    print(word, "(%d)" % n, "->", [(vocab.token(i), round(c, 2)) for i, c in near])

# do similar vectors mean similar contexts? skip-gram sees both sides of a
# word, so compare cosine with the overlap of next-word and previous-word
# distributions (the previous-word one is weighted by corpus frequency)
idx = [task.words.index(w) for w in seen]
succ = task.transitions[np.ix_(idx, idx)]
freq = np.array([counts[w] for w in seen], dtype=float)
pred = (freq[:, None] * succ).T
pred /= pred.sum(axis=1, keepdims=True)
context = np.hstack([succ, pred]) / 2
unit = table.unit_rows()
rows = np.array([vocab.id(w) for w in seen])
cos = unit[rows] @ unit[rows].T
overlap = np.minimum(context[:, None, :], context[None, :, :]).sum(-1)
iu = np.triu_indices(len(rows), 1)
# the link is real but loose: 32 dimensions and 5 epochs only go so far
print("correlation of cosine and context overlap: %.2f" % np.corrcoef(cos[iu], overlap[iu])[0, 1])

# the average pair is only mildly similar, which leaves room for the
# regulariser to carry information
print("mean pairwise cosine: %.2f" % cos[iu].mean())
