"""Attention encoder-decoder producing h_t, P_phi(v|h_t) and the projected embedding.

The encoder is a single-layer bidirectional GRU over feature frames. At every
output step the decoder GRU consumes the previous token and the previous
attention context, attends over the encoder states with a content-based
(scaled dot-product) score, and forms

    h_t     = tanh(W_c [s_t; c_t] + b_c)
    p_phi   = softmax(W_phi h_t + b_phi)                  # word transform
    e_tilde = W_2 tanh(W_1 h_t + b_1) + b_2               # embedding transform

Everything works on batches: row ``b`` of each matrix belongs to utterance
``b``. Single-utterance helpers wrap a batch of one.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import EOS, PAD, SOS
from .errors import ConfigError, ContractError, DataError, ShapeError, TokenLookupError

FORMAT_VERSION = 1
_MASKED = -1e30


@dataclass
class ModelConfig:
    feat_dim: int
    vocab_size: int
    emb_dim: int = 32
    enc_hidden: int = 32
    dec_hidden: int = 64
    att_dim: int = 32
    token_dim: int = 16
    proj_hidden: int = 64
    seed: int = 0
    # stop L_reg / P_theta gradients at h_t so they only train the embedding transform
    detach_projection: bool = False

    def validate(self):
        for name in ("feat_dim", "vocab_size", "emb_dim", "enc_hidden", "dec_hidden", "att_dim", "token_dim", "proj_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model config field {name} must be >= 1")

    @property
    def enc_dim(self):
        return 2 * self.enc_hidden

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def param_shapes(cfg):
    """Name -> shape for every parameter; a pure function of the config."""
    F, V, D = cfg.feat_dim, cfg.vocab_size, cfg.emb_dim
    He, Hd, A, Et, P = cfg.enc_hidden, cfg.dec_hidden, cfg.att_dim, cfg.token_dim, cfg.proj_hidden
    E = 2 * He
    shapes = {}
    for d in ("fwd", "bwd"):
        shapes[f"enc.{d}.Wx"] = (F, 3 * He)
        shapes[f"enc.{d}.Wh"] = (He, 3 * He)
        shapes[f"enc.{d}.bx"] = (3 * He,)
        shapes[f"enc.{d}.bh"] = (3 * He,)
    shapes.update({
        "att.Wk": (E, A),
        "att.Wq": (Hd, A),
        "dec.embed": (V, Et),
        "dec.Wx": (Et + E, 3 * Hd),
        "dec.Wh": (Hd, 3 * Hd),
        "dec.bx": (3 * Hd,),
        "dec.bh": (3 * Hd,),
        "dec.Wc": (Hd + E, Hd),
        "dec.bc": (Hd,),
        "phi.W": (Hd, V),
        "phi.b": (V,),
        "theta.W1": (Hd, P),
        "theta.b1": (P,),
        "theta.W2": (P, D),
        "theta.b2": (D,),
    })
    return shapes


def init_params(cfg, scale=0.1):
    """Uniform(-scale, scale) weights, zero biases, drawn in a fixed name order."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1:
            data = np.zeros(shape)
        else:
            data = rng.uniform(-scale, scale, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


@dataclass
class EncoderStates:
    states: Tensor  # (B*T) x E, batch-major
    keys: Tensor  # (B*T) x A
    mask: np.ndarray  # B x T, True on real frames
    bias: Tensor  # B x T, 0 on real frames, very negative on padding

    @property
    def batch_size(self):
        return self.mask.shape[0]

    @property
    def steps(self):
        return self.mask.shape[1]

    def select(self, rows):
        """States for a subset / repetition of utterances (used by beam search)."""
        rows = np.asarray(rows, dtype=np.intp)
        T = self.steps
        flat = (rows[:, None] * T + np.arange(T)[None, :]).reshape(-1)
        return EncoderStates(
            ad.take_rows(self.states, flat),
            ad.take_rows(self.keys, flat),
            self.mask[rows],
            Tensor(self.bias.data[rows]),
        )


@dataclass
class DecoderState:
    s: Tensor  # B x Hd recurrent state
    context: Tensor  # B x E previous attention context

    def select(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        return DecoderState(ad.take_rows(self.s, rows), ad.take_rows(self.context, rows))


@dataclass
class DecoderStepOutput:
    h: Tensor  # B x Hd
    logits: Tensor  # B x V, input of the word-transform softmax
    p_phi: Tensor  # B x V
    e_tilde: Tensor  # B x D
    attention: Tensor  # B x T


@dataclass
class Rollout:
    steps: list
    targets: np.ndarray  # B x T_out, PAD beyond each target's end
    mask: np.ndarray  # B x T_out
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.steps)


def _gru_step(x_proj, h, Wh, bh, H):
    gh = ad.matmul(h, Wh) + bh
    r = ad.sigmoid(x_proj[:, :H] + gh[:, :H])
    z = ad.sigmoid(x_proj[:, H : 2 * H] + gh[:, H : 2 * H])
    n = ad.tanh(x_proj[:, 2 * H :] + r * gh[:, 2 * H :])
    return n + z * (h - n)


class Seq2Seq:
    def __init__(self, cfg, params=None):
        cfg.validate()
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg)
        expected = param_shapes(cfg)
        if set(self.params) != set(expected):
            raise ShapeError(f"parameter names differ from config: {sorted(set(self.params) ^ set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def parameters(self):
        return list(self.params.values())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    # ------------------------------------------------------------------ encoder

    def encode_batch(self, features):
        """Encode a list of ``T_b x feat_dim`` arrays (padded internally)."""
        cfg, P = self.cfg, self.params
        if not features:
            raise DataError("empty batch")
        feats = [np.asarray(f, dtype=np.float64) for f in features]
        for f in feats:
            if f.ndim != 2 or f.shape[1] != cfg.feat_dim:
                raise ShapeError(f"features of shape {f.shape} do not match feat_dim={cfg.feat_dim}")
            if f.shape[0] < 1:
                raise DataError("utterance with zero frames")
        B = len(feats)
        lengths = np.array([f.shape[0] for f in feats])
        T = int(lengths.max())
        H = cfg.enc_hidden
        mask = np.arange(T)[None, :] < lengths[:, None]

        # time-major stack so rows t*B..t*B+B-1 hold frame t of every utterance
        stacked = np.zeros((T, B, cfg.feat_dim))
        for b, f in enumerate(feats):
            stacked[: f.shape[0], b] = f
        stacked = Tensor(stacked.reshape(T * B, cfg.feat_dim))

        outputs = {}
        for direction in ("fwd", "bwd"):
            x_proj = ad.matmul(stacked, P[f"enc.{direction}.Wx"]) + P[f"enc.{direction}.bx"]
            h = Tensor(np.zeros((B, H)))
            hs = [None] * T
            order = range(T) if direction == "fwd" else range(T - 1, -1, -1)
            for t in order:
                h_new = _gru_step(x_proj[t * B : (t + 1) * B], h, P[f"enc.{direction}.Wh"], P[f"enc.{direction}.bh"], H)
                m = mask[:, t]
                if direction == "bwd" and not m.all():
                    # padding sits at the end, so the backward pass must start at each true last frame
                    h_new = h + Tensor(m[:, None].astype(np.float64)) * (h_new - h)
                h = h_new
                hs[t] = h
            outputs[direction] = ad.concat(hs, axis=1).reshape(B * T, H)
        states = ad.concat([outputs["fwd"], outputs["bwd"]], axis=1)
        keys = ad.matmul(states, P["att.Wk"])
        bias = Tensor(np.where(mask, 0.0, _MASKED))
        return EncoderStates(states, keys, mask, bias)

    def encode(self, features):
        """Encoder states ``T_in x enc_dim`` for one utterance."""
        return self.encode_batch([features]).states

    # ------------------------------------------------------------------ decoder

    def init_decoder_state(self, enc):
        B = enc.batch_size
        return DecoderState(Tensor(np.zeros((B, self.cfg.dec_hidden))), Tensor(np.zeros((B, self.cfg.enc_dim))))

    def decoder_step(self, prev_tokens, state, enc):
        """One output step for every row of the batch."""
        if not isinstance(state, DecoderState):
            raise ContractError("decoder state must come from init_decoder_state")
        cfg, P = self.cfg, self.params
        prev = np.atleast_1d(np.asarray(prev_tokens, dtype=np.intp))
        if prev.shape[0] != state.s.shape[0] or prev.shape[0] != enc.batch_size:
            raise ContractError("batch sizes of tokens, state and encoder states differ")
        if prev.min() < 0 or prev.max() >= cfg.vocab_size:
            raise TokenLookupError(f"previous token id outside vocabulary of size {cfg.vocab_size}")
        Hd = cfg.dec_hidden

        x = ad.concat([ad.take_rows(P["dec.embed"], prev), state.context], axis=1)
        x_proj = ad.matmul(x, P["dec.Wx"]) + P["dec.bx"]
        s = _gru_step(x_proj, state.s, P["dec.Wh"], P["dec.bh"], Hd)

        query = ad.matmul(s, P["att.Wq"]) * (1.0 / np.sqrt(cfg.att_dim))
        scores = ad.block_dot(enc.keys, query) + enc.bias
        attention = ad.softmax(scores)
        context = ad.block_weighted_sum(attention, enc.states)

        h = ad.tanh(ad.matmul(ad.concat([s, context], axis=1), P["dec.Wc"]) + P["dec.bc"])
        logits = ad.matmul(h, P["phi.W"]) + P["phi.b"]
        p_phi = ad.softmax(logits)
        e_tilde = self.project(h)
        return DecoderStepOutput(h, logits, p_phi, e_tilde, attention), DecoderState(s, context)

    def project(self, h):
        """Embedding transform: two-layer MLP from h_t into the embedding space."""
        P = self.params
        if self.cfg.detach_projection:
            h = h.detach()
        hidden = ad.tanh(ad.matmul(h, P["theta.W1"]) + P["theta.b1"])
        return ad.matmul(hidden, P["theta.W2"]) + P["theta.b2"]

    # ------------------------------------------------------------------ rollouts

    def rollout(self, features, targets):
        """Teacher-forced decoding of a batch; step t consumes y_{t-1} (y_0 = SOS)."""
        if len(features) != len(targets):
            raise ContractError("features and targets differ in batch size")
        for y in targets:
            if len(y) == 0:
                raise DataError("empty target sequence")
            if y[-1] != EOS:
                raise DataError("targets must end with EOS")
        B = len(targets)
        T = max(len(y) for y in targets)
        tgt = np.full((B, T), PAD, dtype=np.intp)
        for b, y in enumerate(targets):
            tgt[b, : len(y)] = y
        mask = np.zeros((B, T), dtype=bool)
        for b, y in enumerate(targets):
            mask[b, : len(y)] = True

        enc = self.encode_batch(features)
        state = self.init_decoder_state(enc)
        prev = np.full(B, SOS, dtype=np.intp)
        steps = []
        for t in range(T):
            out, state = self.decoder_step(prev, state, enc)
            steps.append(out)
            prev = tgt[:, t]
        return Rollout(steps, tgt, mask)


def teacher_forced_rollout(model, features, targets):
    """Per-step outputs for one utterance, aligned with ``targets``."""
    return model.rollout([features], [list(targets)]).steps


# --------------------------------------------------------------------------
# checkpoints


def _tensor_record(t):
    return {"shape": list(t.shape), "values": t.data.reshape(-1).tolist()}


def save_checkpoint(path, model, **metadata):
    """JSON checkpoint; floats use Python's shortest round-trip repr (<= 17 digits)."""
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "seq2seq",
        "model_config": model.cfg.to_dict(),
        "params": {name: _tensor_record(p) for name, p in model.params.items()},
    }
    doc.update(metadata)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def read_params(doc, shapes):
    params = {}
    stored = doc.get("params", {})
    if set(stored) != set(shapes):
        raise DataError(f"checkpoint parameters differ from config: {sorted(set(stored) ^ set(shapes))}")
    for name, shape in shapes.items():
        rec = stored[name]
        if tuple(rec["shape"]) != tuple(shape):
            raise DataError(f"checkpoint parameter {name} has shape {rec['shape']}, config implies {list(shape)}")
        values = np.array(rec["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise DataError(f"checkpoint parameter {name} has {values.size} values for shape {list(shape)}")
        params[name] = Tensor(values.reshape(shape), requires_grad=True, name=name)
    return params


def load_checkpoint(path):
    """Returns ``(model, metadata)`` where metadata holds every extra field."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a JSON checkpoint ({exc})") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {doc.get('format_version')!r}")
    cfg = ModelConfig.from_dict(doc["model_config"])
    model = Seq2Seq(cfg, read_params(doc, param_shapes(cfg)))
    meta = {k: v for k, v in doc.items() if k not in ("params", "model_config", "format_version")}
    return model, meta
