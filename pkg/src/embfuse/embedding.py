"""Vocabulary, frozen embedding tables and a small Skip-gram/CBOW trainer.

Embedding files use the plain word2vec text layout::

    V D
    token v1 v2 ... vD
    ...

Reserved tokens (PAD, SOS, EOS, UNK) always occupy ids 0..3. When a file does
not list them, their rows are deterministic pseudo-random unit vectors drawn
from seed 0, so regularisation targets exist for every id.
"""

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DegenerateVectorError, ParseError, TokenLookupError

logger = logging.getLogger(__name__)

PAD, SOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<sos>", "<eos>", "<unk>")
NORM_EPS = 1e-12


class Vocab:
    """Bijective token <-> id map with the four reserved ids in front."""

    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise DataError(f"duplicate token {tok!r} in vocabulary")
            if not tok or any(c.isspace() for c in tok):
                raise DataError(f"token {tok!r} is empty or contains whitespace")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    @classmethod
    def build(cls, sentences):
        """Vocabulary over whitespace-split sentences, most frequent first.

        Ties are broken alphabetically so the result is deterministic.
        """
        counts = {}
        for sent in sentences:
            words = sent.split() if isinstance(sent, str) else sent
            for w in words:
                w = w.lower()
                if w in RESERVED:
                    continue
                counts[w] = counts.get(w, 0) + 1
        return cls(sorted(counts, key=lambda w: (-counts[w], w)))

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def __hash__(self):
        return hash(tuple(self.itos))

    def id(self, token):
        return self.stoi.get(token, UNK)

    def token(self, idx):
        if not 0 <= idx < len(self.itos):
            raise TokenLookupError(f"token id {idx} outside vocabulary of size {len(self.itos)}")
        return self.itos[idx]

    @property
    def words(self):
        return self.itos[len(RESERVED):]

    def digest(self):
        """Stable hash identifying this exact id assignment."""
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def reserved_rows(dim, seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.normal(size=(len(RESERVED), dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class EmbeddingTable:
    """V x D matrix of token embeddings.

    A frozen table holds a read-only array; nothing in the package ever writes
    to it, and numpy refuses in-place writes from elsewhere.
    """

    def __init__(self, matrix, frozen=True):
        arr = np.array(matrix, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise DataError(f"embedding matrix must be V x D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("embedding matrix contains non-finite values")
        arr.flags.writeable = not frozen
        self.matrix = arr
        self.frozen = frozen
        self._unit = None

    @property
    def size(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return self.size

    def row(self, idx):
        if not 0 <= idx < self.size:
            raise TokenLookupError(f"token id {idx} outside table of size {self.size}")
        return self.matrix[idx]

    def norms(self):
        return np.linalg.norm(self.matrix, axis=1)

    def check_rows(self, vocab=None):
        """Raise if any row is (near) zero; names the offending token."""
        bad = np.flatnonzero(self.norms() <= NORM_EPS)
        if bad.size:
            i = int(bad[0])
            name = vocab.token(i) if vocab is not None and i < len(vocab) else f"id {i}"
            raise DegenerateVectorError(f"embedding row for {name} has near-zero norm")

    def unit_rows(self):
        """Row-normalised copy, cached for frozen tables."""
        if self._unit is not None and self.frozen:
            return self._unit
        self.check_rows()
        unit = self.matrix / self.norms()[:, None]
        unit.flags.writeable = False
        if self.frozen:
            self._unit = unit
        return unit

    def digest(self):
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()


# --------------------------------------------------------------------------
# text format


def load_embeddings(path, seed=0):
    """Read a text embedding file into ``(Vocab, EmbeddingTable)``."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty embedding file", line=1)
    header = lines[0].split()
    if len(header) != 2 or not all(h.isdigit() for h in header):
        raise ParseError(f"expected header 'V D', got {lines[0]!r}", line=1)
    count, dim = int(header[0]), int(header[1])
    if dim < 1:
        raise ParseError("embedding dimension must be positive", line=1)

    found = {}
    order = []
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        parts = text.split()
        tok, values = parts[0], parts[1:]
        if len(values) != dim:
            raise ParseError(f"token {tok!r} has {len(values)} values, header says {dim}", line=lineno)
        if tok in found:
            raise ParseError(f"duplicate token {tok!r}", line=lineno)
        try:
            found[tok] = np.array([float(v) for v in values])
        except ValueError:
            raise ParseError(f"non-numeric value in row for {tok!r}", line=lineno) from None
        if tok not in RESERVED:
            order.append(tok)
    if len(found) != count:
        raise ParseError(f"header announces {count} rows but file has {len(found)}", line=1)

    vocab = Vocab(order)
    matrix = np.empty((len(vocab), dim))
    matrix[: len(RESERVED)] = reserved_rows(dim, seed)
    for tok, vec in found.items():
        matrix[vocab.stoi[tok]] = vec
    table = EmbeddingTable(matrix)
    table.check_rows(vocab)
    return vocab, table


def save_embeddings(vocab, table, path):
    """Write the table in text form with 17 significant digits.

    Reserved rows are written only when they differ from the seed-0 defaults,
    which keeps the file compatible with tools that know nothing about them
    while still round-tripping exactly.
    """
    if len(vocab) != table.size:
        raise DataError(f"vocab has {len(vocab)} entries but table has {table.size} rows")
    if not np.all(np.isfinite(table.matrix)):
        raise DataError("refusing to save a non-finite embedding table")
    defaults = reserved_rows(table.dim)
    rows = []
    for i, tok in enumerate(vocab.itos):
        if i < len(RESERVED) and np.array_equal(table.matrix[i], defaults[i]):
            continue
        rows.append(tok + " " + " ".join(f"{v:.17g}" for v in table.matrix[i]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(rows)} {table.dim}\n")
        for r in rows:
            fh.write(r + "\n")


# --------------------------------------------------------------------------
# training


@dataclass
class EmbedTrainConfig:
    mode: str = "skipgram"
    window: int = 3
    negatives: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    dim: int = 32
    seed: int = 0
    batch_size: int = 256
    min_lr_ratio: float = 1e-3

    def validate(self):
        if self.mode not in ("skipgram", "cbow"):
            raise ConfigError(f"mode must be skipgram or cbow, got {self.mode!r}")
        if self.window < 1 or self.negatives < 1 or self.epochs < 1:
            raise ConfigError("window, negatives and epochs must all be >= 1")
        if self.dim < 2:
            raise ConfigError("embedding dimension must be >= 2")
        if not self.learning_rate > 0 or self.batch_size < 1:
            raise ConfigError("learning rate and batch size must be positive")


def train_embeddings(corpus, cfg, vocab_size=None):
    """Skip-gram or CBOW with negative sampling over token-id sentences.

    Returns the input-side vectors as a frozen table. Ids that never occur
    keep their random initialisation; reserved ids absent from the corpus
    get the same seed-0 unit rows the loader would give them.
    """
    cfg.validate()
    sentences = [np.array(s, dtype=np.int64) for s in corpus]
    sentences = [s for s in sentences if s.size]
    if not sentences:
        raise DataError("cannot train embeddings on an empty corpus")
    flat = np.concatenate(sentences)
    if flat.min() < 0:
        raise DataError("negative token id in corpus")
    V = int(flat.max()) + 1 if vocab_size is None else vocab_size
    if flat.max() >= V:
        raise DataError(f"token id {int(flat.max())} >= vocabulary size {V}")

    rng = np.random.default_rng(cfg.seed)
    D = cfg.dim
    w_in = (rng.random((V, D)) - 0.5) / D
    w_out = np.zeros((V, D))

    counts = np.bincount(flat, minlength=V).astype(np.float64)
    noise = counts**0.75
    noise_cdf = np.cumsum(noise / noise.sum())

    batches_per_epoch = None
    step = 0
    for epoch in range(cfg.epochs):
        targets, contexts, mask = _windows(sentences, cfg.window, rng)
        if cfg.mode == "skipgram":
            rows, cols = np.nonzero(mask)
            centers, outs = targets[rows], contexts[rows, cols]
            n_units = centers.size
        else:
            n_units = targets.size
        if batches_per_epoch is None:
            batches_per_epoch = max(1, int(np.ceil(n_units / cfg.batch_size)))
        total = cfg.epochs * batches_per_epoch
        order = rng.permutation(n_units)
        for start in range(0, n_units, cfg.batch_size):
            lr = _decayed(cfg, step, total)
            idx = order[start : start + cfg.batch_size]
            if cfg.mode == "skipgram":
                _sgns_batch(w_in, w_out, centers[idx], outs[idx], noise_cdf, cfg.negatives, lr, rng)
            else:
                _cbow_batch(w_in, w_out, targets[idx], contexts[idx], mask[idx], noise_cdf, cfg.negatives, lr, rng)
            step += 1
        logger.info("embedding epoch %d/%d, %d training units", epoch + 1, cfg.epochs, n_units)

    if not np.all(np.isfinite(w_in)):
        raise DataError("embedding training diverged")
    seen = counts > 0
    defaults = reserved_rows(D)
    for i in range(min(len(RESERVED), V)):
        if not seen[i]:
            w_in[i] = defaults[i]
    return EmbeddingTable(w_in)


def _decayed(cfg, step, total):
    frac = min(step / max(total, 1), 1.0)
    return cfg.learning_rate * max(1.0 - frac, cfg.min_lr_ratio)


def _windows(sentences, window, rng):
    """Per-position (center, padded contexts, mask) with word2vec's shrunk windows."""
    width = 2 * window
    targets, contexts, masks = [], [], []
    for sent in sentences:
        n = sent.size
        spans = rng.integers(1, window + 1, size=n)
        for i in range(n):
            b = spans[i]
            ctx = np.r_[sent[max(0, i - b) : i], sent[i + 1 : i + b + 1]]
            if ctx.size == 0:
                continue
            row = np.zeros(width, dtype=np.int64)
            row[: ctx.size] = ctx
            m = np.zeros(width, dtype=bool)
            m[: ctx.size] = True
            targets.append(sent[i])
            contexts.append(row)
            masks.append(m)
    if not targets:
        return np.zeros(0, np.int64), np.zeros((0, width), np.int64), np.zeros((0, width), bool)
    return np.array(targets), np.array(contexts), np.array(masks)


def _draw_negatives(noise_cdf, shape, rng):
    return np.minimum(np.searchsorted(noise_cdf, rng.random(shape), side="right"), noise_cdf.size - 1)


def _score_and_update_out(w_out, h, positives, noise_cdf, k, lr, rng):
    """Negative-sampling step on the output side; returns d(loss)/dh."""
    n = positives.size
    negs = _draw_negatives(noise_cdf, (n, k), rng)
    ids = np.concatenate([positives[:, None], negs], axis=1)
    labels = np.zeros((n, k + 1))
    labels[:, 0] = 1.0
    out = w_out[ids]
    score = np.einsum("nd,nkd->nk", h, out)
    # exp overflows to inf for very negative scores, giving the exact limit 0
    with np.errstate(over="ignore"):
        g = 1.0 / (1.0 + np.exp(-score)) - labels
    grad_h = np.einsum("nk,nkd->nd", g, out)
    np.add.at(w_out, ids, -lr * g[:, :, None] * h[:, None, :])
    return grad_h


def _sgns_batch(w_in, w_out, centers, contexts, noise_cdf, k, lr, rng):
    grad_h = _score_and_update_out(w_out, w_in[centers], contexts, noise_cdf, k, lr, rng)
    np.add.at(w_in, centers, -lr * grad_h)


def _cbow_batch(w_in, w_out, targets, contexts, mask, noise_cdf, k, lr, rng):
    counts = mask.sum(axis=1, keepdims=True)
    h = (w_in[contexts] * mask[:, :, None]).sum(axis=1) / counts
    grad_h = _score_and_update_out(w_out, h, targets, noise_cdf, k, lr, rng)
    # as in word2vec.c, every context word receives the full hidden-layer error
    rows, cols = np.nonzero(mask)
    np.add.at(w_in, contexts[rows, cols], -lr * grad_h[rows])


def nearest_neighbors(table, token_id, k):
    """The ``k`` most cosine-similar rows to ``token_id``, excluding itself.

    Sorted by descending cosine, ties by ascending id.
    """
    V = table.size
    if not 0 <= token_id < V:
        raise TokenLookupError(f"token id {token_id} outside table of size {V}")
    if not 0 <= k < V:
        raise ConfigError(f"k must satisfy 0 <= k < V={V}, got {k}")
    unit = table.unit_rows()
    cos = np.clip(unit @ unit[token_id], -1.0, 1.0)
    ids = [i for i in range(V) if i != token_id]
    ids.sort(key=lambda i: (-cos[i], i))
    return [(i, float(cos[i])) for i in ids[:k]]
