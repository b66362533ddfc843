"""Losses and output distributions.

Notation follows the model: ``p_phi`` is the word-transform distribution,
``e_tilde`` the projected decoder feature, ``E`` the frozen embedding table.

* ASR loss            -log p_phi[y]
* regulariser         1 - cos(e_tilde, E[y])
* cosine-softmax      p_theta[v] = softmax_v(cos(e_tilde, E[v]) / tau)
* fusion              p_fused = (1 - lambda_f) p_phi + lambda_f p_theta
* fused loss          -log p_fused[y]

The utterance objective sums over output steps ``component_t + lambda * reg_t``
where the component is either the ASR or the fused loss.

All ops accept a single vector (shape ``V`` / ``D``) or a batch (``B x V`` /
``B x D``); the embedding table only ever enters as a constant, so no
gradient can reach it.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, TokenLookupError

DEFAULT_LAMBDA = 10.0
DEFAULT_TAU = 0.1
DEFAULT_LAMBDA_F = 0.1
LOW_RESOURCE_TAU = 0.02


@dataclass
class RegularizationConfig:
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigError(f"regularisation weight must be >= 0, got {self.lam}")


@dataclass
class FusionConfig:
    tau: float = DEFAULT_TAU
    lambda_f: float = DEFAULT_LAMBDA_F

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.lambda_f <= 1.0:
            raise ConfigError(f"lambda_f must lie in [0, 1], got {self.lambda_f}")


@dataclass
class LossBreakdown:
    """Scalar summaries of one objective evaluation plus the graph node.

    ``total == component + lam * reg`` up to summation roundoff; with
    ``lam == 0`` the equality is exact.
    """

    node: Tensor
    total: float
    component: float
    reg: float
    lam: float
    kind: str
    per_step: list = field(default_factory=list)
    mean_cosine: float = float("nan")
    count: int = 0

    def log_record(self, step):
        return {
            "step": step,
            "total": self.total,
            "asr_or_fused": self.component,
            "reg": self.reg,
            "mean_cosine": self.mean_cosine,
        }

    def to_json(self, step):
        return json.dumps(self.log_record(step))


def _pick(p, y):
    if p.ndim == 1:
        y = int(y)
        if not 0 <= y < p.shape[0]:
            raise TokenLookupError(f"target id {y} outside distribution of size {p.shape[0]}")
        return p[y]
    y = np.asarray(y, dtype=np.intp)
    if y.shape != (p.shape[0],):
        raise ContractError(f"need one target per row: {y.shape} vs {p.shape}")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise TokenLookupError(f"target id outside distribution of size {p.shape[1]}")
    return p[np.arange(p.shape[0]), y]


def asr_loss(p_phi, y):
    """Negative log-likelihood of the ground-truth token(s)."""
    return -ad.log(_pick(p_phi, y))


def fused_loss(p_fused, y):
    return asr_loss(p_fused, y)


def reg_loss(e_tilde, e_target):
    """1 - cos(e_tilde, e_target); ``e_target`` is treated as a constant."""
    if isinstance(e_target, Tensor):
        e_target = e_target.data
    return 1.0 - ad.cosine_similarity(e_tilde, Tensor(e_target))


def cosine_logits(e_tilde, table):
    """cos(e_tilde, E[v]) for every v, clamped to [-1, 1].

    A near-zero table row raises DegenerateVectorError naming its id.
    """
    cos = ad.matmul(ad.l2_normalize(e_tilde), Tensor(table.unit_rows().T))
    return ad.clip(cos, -1.0, 1.0)


def cosine_softmax(e_tilde, table, tau=DEFAULT_TAU):
    """Temperature softmax over cosine similarities to every table row."""
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    return ad.softmax(cosine_logits(e_tilde, table), tau=tau)


def fuse(p_phi, p_theta, lambda_f=DEFAULT_LAMBDA_F):
    """Convex mixture in probability space."""
    if not 0.0 <= lambda_f <= 1.0:
        raise ConfigError(f"lambda_f must lie in [0, 1], got {lambda_f}")
    p_phi, p_theta = ad.as_tensor(p_phi), ad.as_tensor(p_theta)
    if p_phi.shape != p_theta.shape:
        raise ContractError(f"distributions differ in shape: {p_phi.shape} vs {p_theta.shape}")
    return p_phi * (1.0 - lambda_f) + p_theta * lambda_f


# --------------------------------------------------------------------------
# sequence objectives


def _normalise_inputs(outputs, targets):
    """Accept a Rollout, or a list of step outputs with one target sequence."""
    steps = getattr(outputs, "steps", outputs)
    mask = getattr(outputs, "mask", None)
    if mask is not None and targets is None:
        return steps, outputs.targets, mask
    if targets is None:
        raise ContractError("targets are required when outputs is a plain step list")
    tgt = np.asarray(targets, dtype=np.intp)
    if tgt.ndim == 1:
        tgt = tgt[None, :]
    if tgt.shape[1] != len(steps):
        raise ContractError(f"{len(steps)} decoder steps but {tgt.shape[1]} targets")
    if mask is None:
        mask = np.ones(tgt.shape, dtype=bool)
    return steps, tgt, mask


def _objective(outputs, targets, table, reg_cfg, fusion_cfg):
    steps, tgt, mask = _normalise_inputs(outputs, targets)
    if not steps:
        raise ContractError("empty rollout")
    lam = reg_cfg.lam
    fused = fusion_cfg is not None
    if (lam > 0 or fused) and table is None:
        raise ConfigError("an embedding table is required for regularisation or fusion")
    if table is not None and steps[0].e_tilde.shape[-1] != table.dim:
        raise ContractError(f"projection dim {steps[0].e_tilde.shape[-1]} != table dim {table.dim}")

    total = comp_sum = reg_sum = None
    per_step = []
    cos_total, n_valid = 0.0, 0
    for t, out in enumerate(steps):
        y = tgt[:, t]
        m = mask[:, t]
        if not m.any():
            continue
        y_safe = np.where(m, y, 0)
        weight = Tensor(m.astype(np.float64))
        if fused:
            p_theta = cosine_softmax(out.e_tilde, table, fusion_cfg.tau)
            comp = fused_loss(fuse(out.p_phi, p_theta, fusion_cfg.lambda_f), y_safe)
        else:
            comp = asr_loss(out.p_phi, y_safe)
        if table is not None:
            reg = reg_loss(out.e_tilde, table.matrix[y_safe])
            term = comp + reg * lam
        else:
            reg = None
            term = comp
        step_total = (term * weight).sum()
        step_comp = (comp * weight).sum()
        total = step_total if total is None else total + step_total
        comp_sum = step_comp if comp_sum is None else comp_sum + step_comp
        if reg is not None:
            step_reg = (reg * weight).sum()
            reg_sum = step_reg if reg_sum is None else reg_sum + step_reg
            cos_total += float(((1.0 - reg.data) * m).sum())
            n_valid += int(m.sum())
            per_step.append((step_comp.item(), step_reg.item()))
        else:
            per_step.append((step_comp.item(), 0.0))

    return LossBreakdown(
        node=total,
        total=total.item(),
        component=comp_sum.item(),
        reg=reg_sum.item() if reg_sum is not None else 0.0,
        lam=lam,
        kind="fused" if fused else "asr",
        per_step=per_step,
        mean_cosine=cos_total / n_valid if n_valid else float("nan"),
        count=int(mask.sum()),
    )


def combined_objective(outputs, targets, table, reg_cfg):
    """Sum over steps of ASR loss + lambda * regulariser.

    ``outputs`` is a :class:`~embfuse.seq2seq.Rollout` (pass ``targets=None``
    to use the rollout's own padded targets) or a list of step outputs for a
    single utterance together with its target ids. ``table`` may be None only
    when ``reg_cfg.lam == 0``.
    """
    return _objective(outputs, targets, table, reg_cfg, None)


def combined_fused_objective(outputs, targets, table, reg_cfg, fusion_cfg):
    """Sum over steps of fused loss + lambda * regulariser."""
    return _objective(outputs, targets, table, reg_cfg, fusion_cfg)
