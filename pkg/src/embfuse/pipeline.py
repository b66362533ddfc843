"""Glue between text corpora, the embedding trainer and the ASR vocabulary."""

import numpy as np

from .corpus import tokenize
from .embedding import EOS, EmbeddingTable, Vocab, train_embeddings
from .errors import DataError


def corpus_ids(sentences, vocab, append_eos=True):
    """Token-id sentences; EOS is appended so it gets a trained vector too."""
    out = []
    for s in sentences:
        ids = tokenize(s, vocab)
        if ids:
            out.append(ids + [EOS] if append_eos else ids)
    return out


def embed_corpus(sentences, cfg, vocab=None):
    """Train embeddings on raw text; returns ``(vocab, table)`` with ids aligned."""
    sentences = list(sentences)
    vocab = vocab or Vocab.build(sentences)
    table = train_embeddings(corpus_ids(sentences, vocab), cfg, vocab_size=len(vocab))
    return vocab, table


def align_table(src_vocab, table, vocab):
    """Reorder ``table`` (indexed by ``src_vocab``) to the ids of ``vocab``.

    Every word of ``vocab`` must have a row. Reserved ids keep the source
    rows so defaults stay identical across files.
    """
    if src_vocab == vocab:
        return table
    missing = [w for w in vocab.words if w not in src_vocab]
    if missing:
        raise DataError(f"{len(missing)} vocabulary words have no embedding, e.g. {missing[:5]}")
    idx = np.array([src_vocab.stoi[t] for t in vocab.itos])
    return EmbeddingTable(table.matrix[idx])
