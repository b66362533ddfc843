"""Greedy and beam-search inference over P_phi or the fused distribution.

Per-step score of a token is ``log p(v)`` where ``p`` is either ``p_phi``
(baseline) or ``(1 - lambda_f) p_phi + lambda_f p_theta`` (fused), mixed in
probability space before the log. With a language model and ``lm_weight > 0``
the step score gains ``lm_weight * log P_LM(v)`` (shallow fusion); the sum is
not renormalised.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .corpus import detokenize
from .embedding import EOS, SOS
from .errors import ConfigError
from .objectives import FusionConfig, cosine_softmax, fuse

DEFAULT_BEAM = 20
DEFAULT_LM_WEIGHT = 0.3


@dataclass
class DecodeConfig:
    beam: int = DEFAULT_BEAM
    max_len: int = 20
    mode: str = "baseline"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    lm_weight: float = DEFAULT_LM_WEIGHT
    length_norm: bool = False

    def __post_init__(self):
        if self.beam < 1:
            raise ConfigError("beam size must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.mode not in ("baseline", "fused"):
            raise ConfigError(f"decode mode must be baseline or fused, got {self.mode!r}")
        if not self.lm_weight >= 0:
            raise ConfigError("lm_weight must be >= 0")


@dataclass
class Hypothesis:
    tokens: tuple
    score: float
    finished: bool = False
    steps: list = field(default_factory=list, repr=False)

    @property
    def output(self):
        """Emitted tokens without the closing EOS."""
        return list(self.tokens[:-1]) if self.finished else list(self.tokens)

    def final_score(self, length_norm=False):
        return self.score / max(len(self.tokens), 1) if length_norm else self.score


def step_distribution(out, table, cfg):
    """The decode-time distribution for a decoder step output (rows = batch)."""
    if cfg.mode == "baseline":
        return out.p_phi
    if table is None:
        raise ConfigError("fused decoding needs the embedding table")
    p_theta = cosine_softmax(out.e_tilde, table, cfg.fusion.tau)
    return fuse(out.p_phi, p_theta, cfg.fusion.lambda_f)


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


def _lm_active(lm, cfg):
    return lm is not None and cfg.lm_weight > 0


def greedy_decode_batch(model, features, table, cfg, lm=None):
    """Arg-max decoding of several utterances at once; returns token lists."""
    use_lm = _lm_active(lm, cfg)
    with no_grad():
        enc = model.encode_batch(features)
        state = model.init_decoder_state(enc)
        B = enc.batch_size
        prev = np.full(B, SOS, dtype=np.intp)
        lm_state = lm.initial_state(B) if use_lm else None
        done = np.zeros(B, dtype=bool)
        outputs = [[] for _ in range(B)]
        for _ in range(cfg.max_len):
            out, state = model.decoder_step(prev, state, enc)
            scores = _log(step_distribution(out, table, cfg).data)
            if use_lm:
                lm_logp, lm_state = lm.score_step(lm_state, prev)
                scores = scores + cfg.lm_weight * lm_logp
            best = np.argmax(scores, axis=1)
            for b in np.flatnonzero(~done):
                if best[b] == EOS:
                    done[b] = True
                else:
                    outputs[b].append(int(best[b]))
            if done.all():
                break
            prev = best
    return outputs


def greedy_decode(model, features, table, cfg, lm=None):
    """Arg-max token sequence (EOS excluded) for one utterance."""
    return greedy_decode_batch(model, [features], table, cfg, lm)[0]


def beam_search(model, features, table, cfg, lm=None, top_k=0):
    """Beam search for one utterance; returns hypotheses ranked best first.

    Every live hypothesis is expanded over the whole vocabulary. Retired
    hypotheses (ended with EOS, or cut at ``max_len``) stay in the pool and
    compete with the expansions at each pruning step. Ties are broken by the
    lexicographic order of token ids. With ``top_k > 0`` each hypothesis
    records the ``top_k`` best ``(token, step score)`` pairs of every step.
    """
    use_lm = _lm_active(lm, cfg)
    with no_grad():
        enc = model.encode_batch([features])
        state = model.init_decoder_state(enc)
        lm_state = lm.initial_state(1) if use_lm else None
        live = [Hypothesis((), 0.0)]
        retired = []
        enc_cache = {1: enc}
        for t in range(cfg.max_len):
            L = len(live)
            if L not in enc_cache:
                enc_cache[L] = enc.select(np.zeros(L, dtype=np.intp))
            prev = np.array([h.tokens[-1] if h.tokens else SOS for h in live], dtype=np.intp)
            out, new_state = model.decoder_step(prev, state, enc_cache[L])
            logp = _log(step_distribution(out, table, cfg).data)
            if use_lm:
                lm_logp, new_lm = lm.score_step(lm_state, prev)
                logp = logp + cfg.lm_weight * lm_logp
            V = logp.shape[1]

            pool = [(h.score, h.tokens, None, h) for h in retired]
            for i, h in enumerate(live):
                total = h.score + logp[i]
                # only a row's own top-`beam` extensions can survive pruning
                for v in np.lexsort((np.arange(V), -total))[: cfg.beam]:
                    pool.append((float(total[v]), h.tokens + (int(v),), i, h))
            pool.sort(key=lambda c: (-c[0], c[1]))

            retired, live, src_rows = [], [], []
            last = t == cfg.max_len - 1
            for score, tokens, i, parent in pool[: cfg.beam]:
                if i is None:
                    retired.append(parent)
                    continue
                steps = parent.steps
                if top_k:
                    best = np.lexsort((np.arange(V), -logp[i]))[:top_k]
                    steps = steps + [[(int(v), float(logp[i, v])) for v in best]]
                hyp = Hypothesis(tokens, score, finished=tokens[-1] == EOS, steps=steps)
                if hyp.finished or last:
                    retired.append(hyp)
                else:
                    live.append(hyp)
                    src_rows.append(i)
            if not live:
                break
            state = new_state.select(src_rows)
            if use_lm:
                lm_state = new_lm.select(src_rows)
    ranked = retired + live
    ranked.sort(key=lambda h: (-h.final_score(cfg.length_norm), h.tokens))
    return ranked


def decode_record(utterance_id, hyp, vocab, verbose=False):
    rec = {
        "utterance_id": utterance_id,
        "tokens": hyp.output,
        "text": detokenize(hyp.output, vocab),
        "score": hyp.score,
    }
    if verbose:
        rec["top5"] = [[[vocab.token(v), lp] for v, lp in step] for step in hyp.steps]
    return json.dumps(rec)
