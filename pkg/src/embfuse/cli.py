"""Command-line pipelines: data, embeddings, ASR and LM training, decoding, WER.

Exit codes: 0 ok, 2 configuration or usage error, 3 data error, 4 numeric
failure. Progress goes to stdout as JSON lines and ``--quiet`` silences it;
warnings and errors go to stderr.
"""

import argparse
import json
import logging
import os
import sys

from .config import RunConfig
from .corpus import (
    SyntheticTaskSpec,
    bigram_entropy,
    corpus_wer,
    generate_synthetic_task,
    load_dataset,
    load_text,
    save_dataset,
    save_text,
)
from .decoding import beam_search, decode_record
from .embedding import RESERVED, Vocab, load_embeddings, save_embeddings
from .errors import ConfigError, ContractError, DataError, NumericError
from .pipeline import align_table, corpus_ids, embed_corpus
from .rnnlm import lm_train, load_lm, save_lm
from .seq2seq import Seq2Seq, load_checkpoint, save_checkpoint
from .training import train_asr

logger = logging.getLogger("embfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TRAIN_FILE, DEV_FILE, TEXT_FILE = "train.jsonl", "dev.jsonl", "text.txt"


class _Out:
    def __init__(self, quiet):
        self.quiet = quiet

    def progress(self, record):
        if not self.quiet:
            print(json.dumps(record), flush=True)

    def result(self, record):
        print(json.dumps(record), flush=True)


def _run_config(args, overrides):
    cfg = RunConfig.load(getattr(args, "config", None), overrides)
    if getattr(args, "mode", None) and args.command == "asr-train":
        cfg.set("mode", args.mode)
        cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args, overrides, out):
    if overrides:
        raise ConfigError(f"gen-data takes no dotted overrides: {[k for k, _ in overrides]}")
    if args.spec is None:
        spec = SyntheticTaskSpec()
    else:
        try:
            with open(args.spec, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"spec file not found: {args.spec}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.spec}: spec must be a JSON object")
        try:
            spec = SyntheticTaskSpec.from_dict(doc)
        except TypeError as exc:
            raise ConfigError(f"{args.spec}: {exc}") from None
    task = generate_synthetic_task(spec)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(task.train, os.path.join(args.out, TRAIN_FILE))
    save_dataset(task.dev, os.path.join(args.out, DEV_FILE))
    save_text(task.text, os.path.join(args.out, TEXT_FILE))
    frames = [u.features.shape[0] for u in task.train]
    out.result({
        "train_utterances": len(task.train),
        "dev_utterances": len(task.dev),
        "text_sentences": len(task.text),
        "vocab_size": spec.vocab_size,
        "feature_dim": spec.feature_dim,
        "mean_frames": sum(frames) / len(frames),
        "bigram_entropy_nats": bigram_entropy(task.text),
    })


def cmd_embed_train(args, overrides, out):
    cfg = _run_config(args, overrides)
    if args.mode is not None:
        cfg.set("embed.mode", args.mode)
    if args.dim is not None:
        cfg.set("embed.dim", args.dim)
        cfg.set("model.emb_dim", args.dim)
    cfg.validate()
    sentences = load_text(args.corpus)
    vocab, table = embed_corpus(sentences, cfg.embed_config())
    save_embeddings(vocab, table, args.out)
    out.progress({"event": "embed-train", "sentences": len(sentences), "vocab_size": len(vocab), "dim": table.dim})


def _load_table(path, vocab, dim):
    src_vocab, table = load_embeddings(path)
    if table.dim != dim:
        raise ConfigError(f"embedding dim {table.dim} in {path} differs from model emb_dim {dim}")
    return align_table(src_vocab, table, vocab)


def _vocab_for(data_dir, train):
    text_path = os.path.join(data_dir, TEXT_FILE)
    if os.path.exists(text_path):
        return Vocab.build(load_text(text_path))
    return Vocab.build(u.text for u in train)


def cmd_asr_train(args, overrides, out):
    cfg = _run_config(args, overrides)
    mode = cfg.mode
    train = load_dataset(os.path.join(args.data, TRAIN_FILE), "train")
    dev = load_dataset(os.path.join(args.data, DEV_FILE), "dev")
    vocab = _vocab_for(args.data, train)
    model_cfg = cfg.model_config(train.feature_dim, len(vocab))

    table = None
    if mode == "baseline":
        if args.embeddings:
            logger.warning("mode=baseline ignores --embeddings %s", args.embeddings)
    elif not args.embeddings:
        raise ConfigError(f"mode={mode} needs --embeddings")
    else:
        table = _load_table(args.embeddings, vocab, model_cfg.emb_dim)

    model = Seq2Seq(model_cfg)
    result = train_asr(
        model, train, dev, vocab, table, mode,
        reg_cfg=cfg.regularization, fusion_cfg=cfg.fusion, cfg=cfg.train_config(), log=out.progress,
    )
    if result.table_digest_before != result.table_digest_after:
        raise ContractError("embedding table changed during training")
    save_checkpoint(
        args.out, model,
        mode=mode,
        regularization={"lam": cfg.regularization.lam},
        fusion={"tau": cfg.fusion.tau, "lambda_f": cfg.fusion.lambda_f},
        vocab=vocab.itos,
        vocab_hash=vocab.digest(),
        embedding_digest=table.digest() if table is not None else None,
        best_epoch=result.best_epoch,
        best_dev_wer=result.best_dev_wer,
        history=result.history,
        run_config=cfg.to_dict(),
    )
    out.progress({"event": "asr-train", "best_epoch": result.best_epoch, "best_dev_wer": result.best_dev_wer})


def cmd_lm_train(args, overrides, out):
    cfg = _run_config(args, overrides)
    sentences = load_text(args.corpus)
    vocab = Vocab.build(sentences)
    lm_cfg = cfg.lm_config(len(vocab))
    lm, history = lm_train(corpus_ids(sentences, vocab), lm_cfg, vocab_hash=vocab.digest(), log=out.progress)
    save_lm(args.out, lm, vocab=vocab.itos, perplexity_log=history)
    out.progress({"event": "lm-train", "vocab_size": len(vocab), "perplexity": history[-1]})


def cmd_decode(args, overrides, out):
    cfg = _run_config(args, overrides)
    model, meta = load_checkpoint(args.checkpoint)
    for key in ("mode", "vocab", "vocab_hash"):
        if key not in meta:
            raise DataError(f"{args.checkpoint}: checkpoint lacks {key!r}")
    vocab = Vocab(meta["vocab"][len(RESERVED):])
    if vocab.digest() != meta["vocab_hash"]:
        raise DataError(f"{args.checkpoint}: stored vocabulary does not match its hash")
    mode = meta["mode"]
    if mode == "fused":
        cfg.set("fusion.tau", meta["fusion"]["tau"])
        cfg.set("fusion.lambda_f", meta["fusion"]["lambda_f"])
    if args.beam is not None:
        cfg.set("decode.beam", args.beam)
    if args.lm_weight is not None:
        cfg.set("decode.lm_weight", args.lm_weight)
    dcfg = cfg.decode_config("fused" if mode == "fused" else "baseline")

    table = None
    if mode == "fused":
        if not args.embeddings:
            raise ConfigError("checkpoint was trained in fused mode; decoding needs --embeddings")
        table = _load_table(args.embeddings, vocab, model.cfg.emb_dim)
        if meta.get("embedding_digest") and table.digest() != meta["embedding_digest"]:
            logger.warning("embedding table differs from the one used in training")
    lm = None
    if args.lm:
        lm = load_lm(args.lm)
        if lm.vocab_hash != meta["vocab_hash"]:
            raise ConfigError("language model vocabulary hash does not match the ASR checkpoint")
        if lm.cfg.vocab_size != len(vocab):
            raise ConfigError("language model vocabulary size does not match the ASR checkpoint")

    data = load_dataset(args.data)
    with open(args.out, "w", encoding="utf-8") as fh:
        for i, u in enumerate(data):
            best = beam_search(model, u.features, table, dcfg, lm, top_k=5 if args.verbose else 0)[0]
            fh.write(decode_record(u.utterance_id, best, vocab, verbose=args.verbose) + "\n")
            out.progress({"event": "decode", "utterance": i + 1, "of": len(data)})


def _read_transcripts(path):
    """``[(id or None, text)]`` from JSON lines with a text field, or plain lines."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    records = []
    for ln in lines:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError:
            rec = None
        if not isinstance(rec, dict) or "text" not in rec:
            return [(None, ln) for ln in lines]
        records.append((rec.get("utterance_id"), str(rec["text"])))
    return records


def cmd_eval_wer(args, overrides, out):
    if overrides:
        raise ConfigError(f"eval-wer takes no dotted overrides: {[k for k, _ in overrides]}")
    ref, hyp = _read_transcripts(args.ref), _read_transcripts(args.hyp)
    if ref and all(i is not None for i, _ in ref + hyp):
        by_id = dict(hyp)
        missing = [i for i, _ in ref if i not in by_id]
        if missing:
            raise DataError(f"{len(missing)} reference utterances have no hypothesis, e.g. {missing[:3]}")
        pairs = [(r.lower().split(), by_id[i].lower().split()) for i, r in ref]
    else:
        if len(ref) != len(hyp):
            raise DataError(f"{args.ref} has {len(ref)} lines but {args.hyp} has {len(hyp)}")
        pairs = [(r.lower().split(), h.lower().split()) for (_, r), (_, h) in zip(ref, hyp)]
    out.result(corpus_wer(pairs).to_dict())


# --------------------------------------------------------------------------
# argument parsing


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="suppress progress lines")

    parser = argparse.ArgumentParser(prog="embfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic train/dev/text task")
    p.add_argument("--spec", help="JSON synthetic task spec (defaults used when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("embed-train", parents=[common], help="train word embeddings on a text corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("skipgram", "cbow"))
    p.add_argument("--dim", type=int)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed_train)

    p = sub.add_parser("asr-train", parents=[common], help="train the attention model")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help=f"directory with {TRAIN_FILE}, {DEV_FILE} and {TEXT_FILE}")
    p.add_argument("--embeddings")
    p.add_argument("--mode", choices=("baseline", "reg", "fused"))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_asr_train)

    p = sub.add_parser("lm-train", parents=[common], help="train the recurrent language model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("decode", parents=[common], help="beam-search decode a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--beam", type=int)
    p.add_argument("--lm")
    p.add_argument("--lm-weight", type=float)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true", help="add per-step top-5 tokens")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-wer", parents=[common], help="score hypotheses against references")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.set_defaults(func=cmd_eval_wer)
    return parser


def _dotted_overrides(parser, extra):
    """``--section.field value`` / ``--section.field=value`` pairs."""
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok.split("=", 1)[0]:
            parser.error(f"unrecognized argument: {tok}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                parser.error(f"override {tok} needs a value")
            key, value = tok[2:], extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = _dotted_overrides(parser, extra)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    out = _Out(args.quiet)
    try:
        args.func(args, overrides, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc.filename or exc}: no such file", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: {exc} (step {exc.step})", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
