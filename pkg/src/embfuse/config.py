"""Run configuration: every module config in one JSON document.

Sections map onto the dataclasses of the package::

    {"mode": "reg",
     "model": {...}, "regularization": {"lam": 10.0},
     "fusion": {"tau": 0.1, "lambda_f": 0.1}, "decode": {...},
     "embed": {...}, "train": {...}, "lm": {...}}

Sizes that follow from the data (feature dim, vocabulary size) are filled in
when the model is built and are not part of the file. Any leaf can be
overridden with a dotted name, e.g. ``train.epochs=5``.
"""

import copy
import json
from dataclasses import asdict, dataclass, field, fields

from .decoding import DecodeConfig
from .embedding import EmbedTrainConfig
from .errors import ConfigError
from .objectives import FusionConfig, RegularizationConfig
from .rnnlm import LMConfig
from .seq2seq import ModelConfig
from .training import MODES, TrainConfig

_DERIVED = {"model": ("feat_dim", "vocab_size"), "lm": ("vocab_size",)}


def _defaults():
    decode = asdict(DecodeConfig())
    decode.pop("fusion")
    decode.pop("mode")
    model = asdict(ModelConfig(feat_dim=1, vocab_size=1))
    lm = asdict(LMConfig(vocab_size=1))
    for section, keys in _DERIVED.items():
        for k in keys:
            (model if section == "model" else lm).pop(k)
    return {
        "mode": "fused",
        "model": model,
        "regularization": asdict(RegularizationConfig()),
        "fusion": asdict(FusionConfig()),
        "decode": decode,
        "embed": asdict(EmbedTrainConfig()),
        "train": asdict(TrainConfig()),
        "lm": lm,
    }


def _merge(base, update, path=""):
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {where!r} must be an object")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class RunConfig:
    data: dict = field(default_factory=_defaults)

    @classmethod
    def load(cls, path=None, overrides=()):
        cfg = cls()
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    doc = json.load(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(doc, dict):
                raise ConfigError(f"{path}: config must be a JSON object")
            _merge(cfg.data, doc)
        for name, value in overrides:
            cfg.set(name, value)
        cfg.validate()
        return cfg

    def set(self, dotted, value):
        """Override one leaf; string values are parsed as JSON when possible."""
        keys = dotted.split(".")
        node = self.data
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown config field {dotted!r}")
            node = node[k]
        if keys[-1] not in node or isinstance(node[keys[-1]], dict):
            raise ConfigError(f"unknown config field {dotted!r}")
        node[keys[-1]] = _parse_value(value) if isinstance(value, str) else value

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        # building a section runs its own checks
        for build in (lambda: self.regularization, lambda: self.fusion, self.train_config, self.embed_config):
            build()
        if self.data["model"]["emb_dim"] != self.data["embed"]["dim"]:
            raise ConfigError(
                f"model.emb_dim={self.data['model']['emb_dim']} differs from embed.dim={self.data['embed']['dim']}"
            )

    @property
    def mode(self):
        return self.data["mode"]

    @property
    def regularization(self):
        """Regulariser weight after the mode override (baseline forces 0)."""
        if self.mode == "baseline":
            return RegularizationConfig(0.0)
        return _build(RegularizationConfig, self.data["regularization"])

    @property
    def fusion(self):
        """Fusion config after the mode override (baseline and reg force lambda_f = 0)."""
        cfg = _build(FusionConfig, self.data["fusion"])
        if self.mode != "fused":
            return FusionConfig(cfg.tau, 0.0)
        return cfg

    def model_config(self, feat_dim, vocab_size):
        return _build(ModelConfig, dict(self.data["model"], feat_dim=feat_dim, vocab_size=vocab_size))

    def lm_config(self, vocab_size):
        return _build(LMConfig, dict(self.data["lm"], vocab_size=vocab_size))

    def decode_config(self, mode, max_len=None):
        d = dict(self.data["decode"])
        if max_len is not None:
            d["max_len"] = max_len
        fusion = _build(FusionConfig, self.data["fusion"])
        return _build(DecodeConfig, dict(d, mode="fused" if mode == "fused" else "baseline", fusion=fusion))

    def train_config(self):
        return _build(TrainConfig, self.data["train"])

    def embed_config(self):
        return _build(EmbedTrainConfig, self.data["embed"])

    def to_dict(self):
        return copy.deepcopy(self.data)


def _build(cls, values):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        obj = cls(**values)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad {cls.__name__}: {exc}") from None
    return obj
