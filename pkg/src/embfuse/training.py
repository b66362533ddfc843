"""ASR training and evaluation loops shared by the CLI and the demos."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import corpus_wer, encode_target
from .decoding import DecodeConfig, beam_search, greedy_decode_batch
from .embedding import EOS
from .errors import ConfigError, NumericError
from .objectives import FusionConfig, RegularizationConfig, combined_fused_objective, combined_objective
from .optim import SGD

logger = logging.getLogger(__name__)

MODES = ("baseline", "reg", "fused")


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 16
    epochs: int = 30
    clip_norm: float = 5.0
    patience: int = 2
    seed: int = 0
    # "sum": per-utterance losses are added over the batch, "mean": averaged
    reduction: str = "mean"

    def validate(self):
        if not self.learning_rate > 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("learning rate, batch size and epochs must be positive")
        if self.clip_norm < 0 or self.patience < 1:
            raise ConfigError("clip_norm must be >= 0 and patience >= 1")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be sum or mean, got {self.reduction!r}")


def effective_configs(mode, reg_cfg, fusion_cfg):
    """Apply the mode's overrides: baseline has no regulariser and no fusion,
    reg keeps the regulariser but not the fusion."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "baseline":
        return RegularizationConfig(0.0), None
    if mode == "reg":
        return reg_cfg, None
    return reg_cfg, fusion_cfg


def decode_config_for(mode, fusion_cfg, **overrides):
    if mode == "fused":
        return DecodeConfig(mode="fused", fusion=fusion_cfg, **overrides)
    return DecodeConfig(mode="baseline", **overrides)


def mode_objective(rollout, table, mode, reg_cfg, fusion_cfg):
    reg_cfg, fusion_cfg = effective_configs(mode, reg_cfg, fusion_cfg)
    if mode == "baseline":
        return combined_objective(rollout, None, None, reg_cfg)
    if fusion_cfg is None:
        return combined_objective(rollout, None, table, reg_cfg)
    return combined_fused_objective(rollout, None, table, reg_cfg, fusion_cfg)


def evaluate_wer(model, dataset, vocab, table, decode_cfg, lm=None, use_beam=False, batch_size=256):
    """Pooled WER of the model's decodes against the dataset transcripts."""
    refs = [encode_target(u.text, vocab)[:-1] for u in dataset]
    hyps = []
    if use_beam:
        for u in dataset:
            hyps.append(beam_search(model, u.features, table, decode_cfg, lm)[0].output)
    else:
        feats = [u.features for u in dataset]
        for i in range(0, len(feats), batch_size):
            hyps.extend(greedy_decode_batch(model, feats[i : i + batch_size], table, decode_cfg, lm))
    return corpus_wer(zip(refs, hyps)), hyps


@dataclass
class TrainResult:
    best_epoch: int
    best_dev_wer: float
    history: list = field(default_factory=list)
    table_digest_before: str = ""
    table_digest_after: str = ""


def _snapshot(model):
    return {name: p.data for name, p in model.params.items()}


def _restore(model, snap):
    for name, data in snap.items():
        model.params[name].data = data


def train_asr(model, train, dev, vocab, table, mode, reg_cfg=None, fusion_cfg=None, cfg=None, log=None):
    """Minibatch SGD on the mode's objective with dev-WER model selection.

    The loss per utterance is summed over output steps and then averaged (or
    summed, see ``TrainConfig.reduction``) over the batch. After every epoch
    the dev set is greedily decoded with the mode's decode distribution; the
    best epoch's parameters are restored at the end.
    The learning rate halves whenever dev WER has not improved for
    ``cfg.patience`` epochs. ``log`` receives one dict per step and per epoch.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    reg_cfg = reg_cfg or RegularizationConfig()
    fusion_cfg = fusion_cfg or FusionConfig()
    if mode == "baseline":
        table = None
    elif table is None:
        raise ConfigError(f"mode {mode!r} needs an embedding table")
    if table is not None and table.dim != model.cfg.emb_dim:
        raise ConfigError(f"embedding dim {table.dim} != model emb_dim {model.cfg.emb_dim}")
    if table is not None and table.size != model.cfg.vocab_size:
        raise ConfigError(f"table has {table.size} rows but model vocab is {model.cfg.vocab_size}")

    digest_before = table.digest() if table is not None else ""
    decode_cfg = decode_config_for(mode, fusion_cfg, max_len=_max_len(train, dev))
    targets = [encode_target(u.text, vocab) for u in train]
    feats = [u.features for u in train]
    opt = SGD(model.parameters(), lr=cfg.learning_rate, clip_norm=cfg.clip_norm)
    rng = np.random.default_rng(cfg.seed)

    best = (math.inf, -1, _snapshot(model))
    stall = 0
    step = 0
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train))
        sums = {"total": 0.0, "component": 0.0, "reg": 0.0, "tokens": 0}
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            rollout = model.rollout([feats[j] for j in idx], [targets[j] for j in idx])
            br = mode_objective(rollout, table, mode, reg_cfg, fusion_cfg)
            if not math.isfinite(br.total):
                raise NumericError(f"non-finite loss at step {step}", step=step)
            opt.zero_grad()
            ad.backward(br.node if cfg.reduction == "sum" else br.node * (1.0 / len(idx)))
            grad_norm = opt.step()
            if not math.isfinite(grad_norm):
                raise NumericError(f"non-finite gradient at step {step}", step=step)
            sums["total"] += br.total
            sums["component"] += br.component
            sums["reg"] += br.reg
            sums["tokens"] += br.count
            if log is not None:
                rec = br.log_record(step)
                rec.update(epoch=epoch, batch=len(idx), grad_norm=grad_norm, lr=opt.lr)
                log(rec)
            step += 1

        report, _ = evaluate_wer(model, dev, vocab, table, decode_cfg)
        epoch_rec = {
            "epoch": epoch,
            "train_total_per_token": sums["total"] / max(sums["tokens"], 1),
            "train_component_per_token": sums["component"] / max(sums["tokens"], 1),
            "train_reg_per_token": sums["reg"] / max(sums["tokens"], 1),
            "dev_wer": report.wer,
            "lr": opt.lr,
        }
        history.append(epoch_rec)
        if log is not None:
            log(epoch_rec)
        logger.info("epoch %d dev wer %.4f", epoch, report.wer)
        if report.wer < best[0]:
            best = (report.wer, epoch, _snapshot(model))
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                opt.lr *= 0.5
                stall = 0

    _restore(model, best[2])
    return TrainResult(best[1], best[0], history, digest_before, table.digest() if table is not None else "")


def _max_len(*datasets):
    longest = max(len(u.text.split()) for d in datasets for u in d)
    return longest + 5


def projection_cosines(model, dataset, vocab, table, batch_size=64):
    """cos(e_tilde_t, E[y_t]) for every teacher-forced step of the dataset."""
    out = []
    with ad.no_grad():
        for i in range(0, len(dataset), batch_size):
            batch = dataset.utterances[i : i + batch_size]
            targets = [encode_target(u.text, vocab) for u in batch]
            roll = model.rollout([u.features for u in batch], targets)
            for t, step in enumerate(roll.steps):
                m = roll.mask[:, t]
                y = roll.targets[m, t]
                cos = ad.cosine_similarity(Tensor(step.e_tilde.data[m]), Tensor(table.matrix[y])).data
                out.extend(np.atleast_1d(cos).tolist())
    return np.array(out)


def random_pair_cosines(model, dataset, vocab, table, seed=0, batch_size=64):
    """Same projections paired with uniformly random non-reserved table rows."""
    rng = np.random.default_rng(seed)
    out = []
    with ad.no_grad():
        for i in range(0, len(dataset), batch_size):
            batch = dataset.utterances[i : i + batch_size]
            targets = [encode_target(u.text, vocab) for u in batch]
            roll = model.rollout([u.features for u in batch], targets)
            for t, step in enumerate(roll.steps):
                m = roll.mask[:, t]
                rows = rng.integers(EOS + 2, table.size, size=int(m.sum()))
                cos = ad.cosine_similarity(Tensor(step.e_tilde.data[m]), Tensor(table.matrix[rows])).data
                out.extend(np.atleast_1d(cos).tolist())
    return np.array(out)
