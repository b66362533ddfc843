"""Tokenisation, datasets, the synthetic pseudo-ASR task and WER scoring.

The synthetic task stands in for real speech: transcripts come from a random
first-order Markov chain over ``vocab_size`` word types, and every word is
rendered as 1-3 feature frames of a fixed per-word prototype plus Gaussian
noise. A larger text-only corpus from the same chain feeds the embedding
trainer and the language model.
"""

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedding import EOS, RESERVED, Vocab
from .errors import ConfigError, DataError


def tokenize(text, vocab):
    """Lower-cased whitespace split mapped to ids; unknown words map to UNK."""
    return [vocab.id(w) for w in text.lower().split()]


def detokenize(ids, vocab):
    reserved = len(RESERVED)
    return " ".join(vocab.token(int(i)) for i in ids if int(i) >= reserved)


def encode_target(text, vocab):
    return tokenize(text, vocab) + [EOS]


# --------------------------------------------------------------------------
# datasets


@dataclass
class Utterance:
    utterance_id: str
    features: np.ndarray
    text: str


@dataclass
class Dataset:
    utterances: list
    split: str = "train"

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    def targets(self, vocab):
        return [encode_target(u.text, vocab) for u in self.utterances]

    @property
    def feature_dim(self):
        return self.utterances[0].features.shape[1] if self.utterances else 0


def save_dataset(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for u in dataset:
            rec = {"utterance_id": u.utterance_id, "features": u.features.tolist(), "text": u.text}
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path, split=None):
    utts = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                feats = np.array(rec["features"], dtype=np.float64)
                uid, text = str(rec["utterance_id"]), str(rec["text"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad dataset record ({exc})") from None
            if feats.ndim != 2 or feats.shape[0] < 1:
                raise DataError(f"{path}:{lineno}: features must be a non-empty T x F list")
            if not np.all(np.isfinite(feats)):
                raise DataError(f"{path}:{lineno}: non-finite features")
            if dim is None:
                dim = feats.shape[1]
            elif feats.shape[1] != dim:
                raise DataError(f"{path}:{lineno}: feature dim {feats.shape[1]} != {dim}")
            utts.append(Utterance(uid, feats, text))
    if not utts:
        raise DataError(f"{path}: no utterances")
    return Dataset(utts, split or "data")


def save_text(sentences, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(s + "\n")


def load_text(path):
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DataError(f"{path}: empty text corpus")
    return lines


# --------------------------------------------------------------------------
# synthetic task


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 50
    feature_dim: int = 8
    frames_per_token: tuple = (1, 3)
    noise: float = 1.0
    concentration: float = 0.01
    num_train: int = 400
    num_dev: int = 200
    num_text: int = 4000
    length: tuple = (3, 8)
    seed: int = 0

    def validate(self):
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        lo, hi = self.frames_per_token
        if not 1 <= lo <= hi:
            raise ConfigError(f"frames_per_token range {self.frames_per_token} is empty")
        lo, hi = self.length
        if not 1 <= lo <= hi:
            raise ConfigError(f"length range {self.length} is empty")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if not self.concentration > 0:
            raise ConfigError("concentration must be > 0")
        if self.num_train < 1 or self.num_dev < 0 or self.num_text < 0:
            raise ConfigError("utterance counts must be positive")

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic task fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("frames_per_token", "length"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    words: list
    initial: np.ndarray
    transitions: np.ndarray
    prototypes: np.ndarray
    train: Dataset
    dev: Dataset
    text: list = field(default_factory=list)


def _dirichlet(rng, alpha, size):
    # gamma draws can all underflow to 0 for tiny alpha; then pick one outcome at random
    g = rng.gamma(alpha, size=size)
    total = g.sum()
    if total <= 0 or not np.isfinite(total):
        out = np.zeros(size)
        out[rng.integers(size)] = 1.0
        return out
    return g / total


def generate_synthetic_task(spec):
    """Sample chain, prototypes, train/dev datasets and the text-only corpus."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    V = spec.vocab_size
    width = len(str(V - 1))
    words = [f"w{i:0{width}d}" for i in range(V)]
    initial = _dirichlet(rng, spec.concentration, V)
    transitions = np.stack([_dirichlet(rng, spec.concentration, V) for _ in range(V)])
    # no immediate repeats: frames of "w w" could not be told apart from "w"
    np.fill_diagonal(transitions, 0.0)
    rows = transitions.sum(axis=1, keepdims=True)
    off = (1.0 - np.eye(V)) / (V - 1)
    transitions = np.where(rows > 0, transitions / np.where(rows > 0, rows, 1.0), off)
    prototypes = rng.normal(size=(V, spec.feature_dim))

    def sentence():
        n = int(rng.integers(spec.length[0], spec.length[1] + 1))
        seq = [int(rng.choice(V, p=initial))]
        for _ in range(n - 1):
            seq.append(int(rng.choice(V, p=transitions[seq[-1]])))
        return seq

    def render(seq):
        frames = []
        lo, hi = spec.frames_per_token
        for w in seq:
            k = int(rng.integers(lo, hi + 1))
            frames.append(prototypes[w] + spec.noise * rng.normal(size=(k, spec.feature_dim)))
        return np.concatenate(frames, axis=0)

    def utterances(split, count):
        out = []
        for i in range(count):
            seq = sentence()
            text = " ".join(words[w] for w in seq)
            out.append(Utterance(f"{split}-{i:05d}", render(seq), text))
        return Dataset(out, split)

    train = utterances("train", spec.num_train)
    dev = utterances("dev", spec.num_dev)
    extra = [" ".join(words[w] for w in sentence()) for _ in range(spec.num_text)]
    text = [u.text for u in train] + extra
    return SyntheticTask(spec, words, initial, transitions, prototypes, train, dev, text)


def bigram_entropy(sentences):
    """Empirical conditional entropy H(next | previous) in nats."""
    pair_counts = Counter()
    prev_counts = Counter()
    for s in sentences:
        toks = s.split() if isinstance(s, str) else list(s)
        for a, b in zip(toks, toks[1:]):
            pair_counts[(a, b)] += 1
            prev_counts[a] += 1
    total = sum(pair_counts.values())
    if total == 0:
        raise DataError("corpus has no bigrams")
    h = 0.0
    for (a, _), c in pair_counts.items():
        h -= c / total * math.log(c / prev_counts[a])
    return h


# --------------------------------------------------------------------------
# word error rate


@dataclass
class WerReport:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0

    @property
    def errors(self):
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self):
        return self.errors / self.ref_len if self.ref_len else 0.0

    def __add__(self, other):
        return WerReport(
            self.substitutions + other.substitutions,
            self.insertions + other.insertions,
            self.deletions + other.deletions,
            self.ref_len + other.ref_len,
        )

    def to_dict(self):
        return {
            "substitutions": self.substitutions,
            "insertions": self.insertions,
            "deletions": self.deletions,
            "ref_len": self.ref_len,
            "wer": self.wer,
        }


def edit_distance(ref, hyp):
    """Levenshtein distance between two sequences (unit costs)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j - 1] + (r != h), prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[-1]


def wer(ref, hyp):
    """Align ``hyp`` to ``ref`` and count substitutions, insertions, deletions.

    On equal-cost paths the backtrace prefers substitution, then insertion,
    then deletion.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise DataError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    s = ins = dels = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dels += 1
            i -= 1
    return WerReport(int(s), ins, dels, n)


def corpus_wer(pairs):
    """Pooled report over ``(ref, hyp)`` pairs: total errors / total ref words."""
    total = WerReport()
    for ref, hyp in pairs:
        total = total + wer(ref, hyp)
    return total
