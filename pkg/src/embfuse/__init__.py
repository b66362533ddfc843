"""Attention seq2seq recognition with word-embedding regularisation and
cosine-softmax fusion, on a small numpy autodiff engine."""

from .corpus import SyntheticTaskSpec, corpus_wer, generate_synthetic_task, wer
from .decoding import DecodeConfig, beam_search, greedy_decode
from .embedding import EmbeddingTable, EmbedTrainConfig, Vocab, load_embeddings, save_embeddings, train_embeddings
from .objectives import (
    FusionConfig,
    RegularizationConfig,
    combined_fused_objective,
    combined_objective,
    cosine_softmax,
    fuse,
)
from .rnnlm import LMConfig, RNNLM, lm_train
from .seq2seq import ModelConfig, Seq2Seq, load_checkpoint, save_checkpoint
from .training import TrainConfig, train_asr

__version__ = "0.1.0"

__all__ = [
    "DecodeConfig",
    "EmbedTrainConfig",
    "EmbeddingTable",
    "FusionConfig",
    "LMConfig",
    "ModelConfig",
    "RNNLM",
    "RegularizationConfig",
    "Seq2Seq",
    "SyntheticTaskSpec",
    "TrainConfig",
    "Vocab",
    "beam_search",
    "combined_fused_objective",
    "combined_objective",
    "corpus_wer",
    "cosine_softmax",
    "fuse",
    "generate_synthetic_task",
    "greedy_decode",
    "lm_train",
    "load_checkpoint",
    "load_embeddings",
    "save_checkpoint",
    "save_embeddings",
    "train_asr",
    "train_embeddings",
    "wer",
]
