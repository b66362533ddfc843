"""GRU language model for shallow fusion and perplexity evaluation.

Sentences are id sequences; each is framed as ``SOS w1 .. wn`` -> ``w1 .. wn EOS``
so EOS is predicted and SOS never is.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .embedding import EOS, PAD, SOS
from .errors import ConfigError, DataError, NumericError, TokenLookupError
from .optim import SGD
from .seq2seq import _gru_step, _tensor_record, read_params

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass
class LMConfig:
    vocab_size: int
    hidden: int = 64
    embed_dim: int = 32
    seed: int = 0
    epochs: int = 10
    learning_rate: float = 1.0
    batch_size: int = 32
    clip_norm: float = 5.0

    def validate(self):
        if min(self.vocab_size, self.hidden, self.embed_dim, self.epochs, self.batch_size) < 1:
            raise ConfigError("LM sizes, epochs and batch size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("LM learning rate must be > 0")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown LM config fields: {sorted(unknown)}")
        return cls(**d)


def lm_param_shapes(cfg):
    V, H, E = cfg.vocab_size, cfg.hidden, cfg.embed_dim
    return {
        "embed": (V, E),
        "Wx": (E, 3 * H),
        "Wh": (H, 3 * H),
        "bx": (3 * H,),
        "bh": (3 * H,),
        "Wo": (H, V),
        "bo": (V,),
    }


@dataclass
class LMState:
    h: Tensor

    def select(self, rows):
        return LMState(ad.take_rows(self.h, np.asarray(rows, dtype=np.intp)))


class RNNLM:
    def __init__(self, cfg, params=None, vocab_hash=None):
        cfg.validate()
        self.cfg = cfg
        self.vocab_hash = vocab_hash
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = {}
            for name, shape in lm_param_shapes(cfg).items():
                data = np.zeros(shape) if len(shape) == 1 else rng.uniform(-0.1, 0.1, size=shape)
                params[name] = Tensor(data, requires_grad=True, name=name)
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def initial_state(self, batch=1):
        return LMState(Tensor(np.zeros((batch, self.cfg.hidden))))

    def step(self, tokens, state):
        """Logits for the next token after consuming ``tokens`` (one per row)."""
        P = self.params
        tokens = np.atleast_1d(np.asarray(tokens, dtype=np.intp))
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise TokenLookupError(f"token id outside LM vocabulary of size {self.cfg.vocab_size}")
        x_proj = ad.matmul(ad.take_rows(P["embed"], tokens), P["Wx"]) + P["bx"]
        h = _gru_step(x_proj, state.h, P["Wh"], P["bh"], self.cfg.hidden)
        return ad.matmul(h, P["Wo"]) + P["bo"], LMState(h)

    def score_step(self, state, tokens):
        """Log-probabilities (numpy, rows = batch) and the advanced state."""
        with no_grad():
            logits, new = self.step(tokens, state)
            return ad.log_softmax(logits).data, new

    def sequence_nll(self, sentences):
        """Summed next-token NLL over a batch of sentences and the token count."""
        inputs, targets, mask = _frame(sentences)
        state = self.initial_state(len(sentences))
        total = None
        for t in range(inputs.shape[1]):
            logits, state = self.step(inputs[:, t], state)
            logp = ad.log_softmax(logits)
            picked = logp[np.arange(len(sentences)), targets[:, t]]
            term = (picked * Tensor(mask[:, t].astype(np.float64))).sum()
            total = term if total is None else total + term
        return -total, int(mask.sum())


def _strip(sentence):
    s = [int(x) for x in sentence]
    if s and s[0] == SOS:
        s = s[1:]
    if s and s[-1] == EOS:
        s = s[:-1]
    return s


def _frame(sentences):
    seqs = [_strip(s) for s in sentences]
    B = len(seqs)
    T = max(len(s) for s in seqs) + 1
    inputs = np.full((B, T), PAD, dtype=np.intp)
    targets = np.full((B, T), PAD, dtype=np.intp)
    mask = np.zeros((B, T), dtype=bool)
    for b, s in enumerate(seqs):
        inputs[b, 0] = SOS
        inputs[b, 1 : len(s) + 1] = s
        targets[b, : len(s)] = s
        targets[b, len(s)] = EOS
        mask[b, : len(s) + 1] = True
    return inputs, targets, mask


def lm_score_step(lm, state, token):
    """Single-sentence step: ``(log-prob vector of size V, new state)``."""
    logp, new = lm.score_step(state, [token])
    return Tensor(logp[0]), new


def perplexity(lm, corpus, batch_size=256):
    """exp(mean NLL per predicted token); EOS counts, SOS does not."""
    corpus = [s for s in corpus]
    if not corpus:
        raise DataError("perplexity of an empty corpus is undefined")
    nll, count = 0.0, 0
    with no_grad():
        for i in range(0, len(corpus), batch_size):
            batch_nll, n = lm.sequence_nll(corpus[i : i + batch_size])
            nll += batch_nll.item()
            count += n
    return math.exp(nll / count)


def lm_train(corpus, cfg, dev=None, vocab_hash=None, log=None):
    """Train on id sentences with SGD; returns ``(lm, history)``.

    ``history[0]`` is the perplexity before any update and ``history[k]`` the
    perplexity after epoch ``k``, both measured on ``dev`` when given, else on
    the training corpus.
    """
    cfg.validate()
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise DataError("cannot train a language model on an empty corpus")
    lm = RNNLM(cfg, vocab_hash=vocab_hash)
    opt = SGD(lm.parameters(), lr=cfg.learning_rate, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)
    eval_set = dev if dev is not None else corpus
    history = [perplexity(lm, eval_set)]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(corpus))
        for i in range(0, len(order), cfg.batch_size):
            batch = [corpus[j] for j in order[i : i + cfg.batch_size]]
            opt.zero_grad()
            nll, n = lm.sequence_nll(batch)
            loss = nll * (1.0 / n)
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite LM loss at step {step}", step=step)
            ad.backward(loss)
            opt.step()
            step += 1
        history.append(perplexity(lm, eval_set))
        record = {"epoch": epoch + 1, "perplexity": history[-1]}
        logger.info("lm epoch %d perplexity %.4f", epoch + 1, history[-1])
        if log is not None:
            log(record)
    return lm, history


def save_lm(path, lm, **metadata):
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "rnnlm",
        "config": asdict(lm.cfg),
        "vocab_hash": lm.vocab_hash,
        "params": {name: _tensor_record(p) for name, p in lm.params.items()},
    }
    doc.update(metadata)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_lm(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a JSON checkpoint ({exc})") from None
    if doc.get("format_version") != FORMAT_VERSION or doc.get("kind") != "rnnlm":
        raise DataError(f"{path}: not a version-{FORMAT_VERSION} LM checkpoint")
    cfg = LMConfig.from_dict(doc["config"])
    return RNNLM(cfg, read_params(doc, lm_param_shapes(cfg)), vocab_hash=doc.get("vocab_hash"))
