"""Command-line entry point: prepare / train / sweep / resume / report /
translate / count-params.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data, 5 integrity or
corruption, 6 a train run halted divergent, 7 interrupted (resumable).
The DESKMT_OUT environment variable, when set, is the root that relative
output directories resolve against.
"""

from __future__ import annotations

import argparse
import json
import os
import signal
import sys

import numpy as np

from .data import (
    EOS_ID,
    ParallelCorpus,
    Vocab,
    build_vocab,
    load_corpus,
    normalize,
    split_indices,
)
from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    DataError,
    DegenerateBatchError,
    IntegrityError,
)
from .model import (
    ModelConfig,
    count_params,
    greedy_decode,
    load_checkpoint,
    params_from_arrays,
)
from .report import emit_curves, emit_table, run_label, select_best
from .sweep import (
    Budget,
    Registry,
    STATUS_HALTED_DIVERGENT,
    SweepGrid,
    SweepInterrupted,
    SweepSpec,
    execute_sweep,
    resume_sweep,
    _sweep_paths,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_INTEGRITY = 5
EXIT_DIVERGED = 6
EXIT_INTERRUPTED = 7

_stop_requested = False


def _request_stop(signum, frame):
    global _stop_requested
    _stop_requested = True


def _interrupted() -> bool:
    return _stop_requested


def _out_path(path: str) -> str:
    root = os.environ.get("DESKMT_OUT", "")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _add_axis_flags(p: argparse.ArgumentParser):
    p.add_argument("--d-model", type=int, required=True, help="embedding dimension")
    p.add_argument("--heads", type=int, required=True, help="attention heads")
    p.add_argument("--layers", type=int, required=True, help="encoder (= decoder) layers")
    p.add_argument("--dropout", type=float, default=0.1, help="dropout probability")


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--corpus", required=True, help="tab-separated parallel corpus")
    p.add_argument("--seed", type=int, default=0, help="seed for split/init/shuffle/dropout")
    p.add_argument("--min-freq", type=int, default=2, help="vocabulary frequency threshold")
    p.add_argument("--split-ratio", type=float, default=0.7, help="train fraction")
    p.add_argument("--max-pairs", type=int, default=None, help="use only the first N pairs")
    p.add_argument("--max-len", type=int, default=512, help="sequence length cap")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="deskmt",
        description="Desk-scale translation training and hyperparameter ablation.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build vocabularies and the split manifest")
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a single configuration")
    _add_data_flags(p)
    _add_axis_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=100, help="epoch cap")
    p.add_argument("--lr", type=float, default=1e-4, help="learning rate")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--wall-cap-minutes", type=float, default=480.0,
                   help="wall-clock cap")

    p = sub.add_parser("sweep", help="run a hyperparameter grid under a budget")
    p.add_argument("--spec", required=True, help="sweep spec JSON document")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--corpus", default=None, help="override the spec's corpus path")
    p.add_argument("--seed", type=int, default=None, help="override the spec's seed")

    p = sub.add_parser("resume", help="continue an interrupted sweep")
    p.add_argument("--out", required=True, help="sweep output directory")

    p = sub.add_parser("report", help="emit summary table, curves, and best run")
    p.add_argument("--out", required=True, help="sweep output directory")
    p.add_argument("--best", action="store_true", help="print only the best run's row")
    p.add_argument("--no-curves", action="store_true", help="skip per-run curve files")

    p = sub.add_parser("translate", help="greedy-decode one sentence with a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--vocab-src", required=True)
    p.add_argument("--vocab-tgt", required=True)
    p.add_argument("--text", required=True, help="source sentence")
    p.add_argument("--max-out-len", type=int, default=64)

    p = sub.add_parser("count-params", help="exact parameter count for a config")
    _add_axis_flags(p)
    p.add_argument("--src-vocab", type=int, required=True, help="source vocab size")
    p.add_argument("--tgt-vocab", type=int, required=True, help="target vocab size")
    p.add_argument("--max-len", type=int, default=512)

    return ap


def _cmd_prepare(args) -> int:
    out = _out_path(args.out)
    os.makedirs(os.path.join(out, "data"), exist_ok=True)
    corpus = load_corpus(args.corpus)
    if args.max_pairs is not None:
        corpus = ParallelCorpus(corpus.pairs[: args.max_pairs], path=corpus.path,
                                content_hash=corpus.content_hash,
                                skipped_lines=corpus.skipped_lines)
    train_idx, val_idx = split_indices(len(corpus.pairs), args.split_ratio, args.seed)
    train = ParallelCorpus([corpus.pairs[i] for i in train_idx],
                           path=corpus.path, content_hash=corpus.content_hash)
    src_vocab = build_vocab(train, "source", min_freq=args.min_freq)
    tgt_vocab = build_vocab(train, "target", min_freq=args.min_freq)
    src_vocab.save(os.path.join(out, "data", "vocab.src.txt"))
    tgt_vocab.save(os.path.join(out, "data", "vocab.tgt.txt"))
    with open(os.path.join(out, "data", "split.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "corpus": corpus.path,
            "corpus_sha256": corpus.content_hash,
            "seed": args.seed,
            "split_ratio": args.split_ratio,
            "max_pairs": args.max_pairs,
            "n_pairs": len(corpus.pairs),
            "train_indices": train_idx,
            "val_indices": val_idx,
        }, fh, indent=1)
    print(f"pairs: {len(corpus.pairs)} (skipped {corpus.skipped_lines} lines)")
    print(f"train/val: {len(train_idx)}/{len(val_idx)}")
    print(f"vocab sizes: src={src_vocab.size} tgt={tgt_vocab.size}")
    print(f"artifacts in {os.path.join(out, 'data')}")
    return EXIT_OK


def _single_config_spec(args) -> SweepSpec:
    return SweepSpec(
        grid=SweepGrid(d_model=[args.d_model], n_heads=[args.heads],
                       n_layers=[args.layers], dropout=[args.dropout]),
        budget=Budget(epoch_cap=args.epochs,
                      wall_clock_cap_minutes=args.wall_cap_minutes),
        corpus=args.corpus,
        seed=args.seed,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        min_freq=args.min_freq,
        max_len=args.max_len,
        split_ratio=args.split_ratio,
        max_pairs=args.max_pairs,
    )


def _print_records(records):
    _, text = emit_table(records)
    print(text, end="")


def _cmd_train(args) -> int:
    out = _out_path(args.out)
    records = execute_sweep(_single_config_spec(args), out, interrupt=_interrupted)
    _print_records(records)
    if any(r.status == STATUS_HALTED_DIVERGENT for r in records):
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec = SweepSpec.load(args.spec)
    if args.corpus is not None:
        spec.corpus = args.corpus
    if args.seed is not None:
        spec.seed = args.seed
    records = execute_sweep(spec, _out_path(args.out), interrupt=_interrupted)
    _print_records(records)
    return EXIT_OK


def _cmd_resume(args) -> int:
    records = resume_sweep(_out_path(args.out), interrupt=_interrupted)
    _print_records(records)
    return EXIT_OK


def _cmd_report(args) -> int:
    out = _out_path(args.out)
    paths = _sweep_paths(out)
    records = Registry(paths["registry"]).replay()
    if args.best:
        best = select_best(records)
        _, text = emit_table([best])
        print(text, end="")
        return EXIT_OK
    report_dir = os.path.join(out, "report")
    os.makedirs(report_dir, exist_ok=True)
    csv_text, text = emit_table(records)
    with open(os.path.join(report_dir, "table.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(os.path.join(report_dir, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    if not args.no_curves:
        for rec in records:
            metrics_path = os.path.join(paths["runs"], rec.run_id, "metrics.jsonl")
            if os.path.exists(metrics_path):
                emit_curves(metrics_path, rec.run_id,
                            os.path.join(report_dir, "curves"), rec.combo)
    try:
        best = select_best(records)
        print(f"best: {run_label(best.combo)} "
              f"val_perplexity={best.final['val_perplexity']:.4f} "
              f"params={best.param_count / 1e6:.2f}M")
    except ConfigError:
        print("best: (no completed runs)")
    print(f"report in {report_dir}")
    return EXIT_OK


def _cmd_translate(args) -> int:
    config, arrays, _ = load_checkpoint(args.checkpoint)
    params = params_from_arrays(
        config, {k: v for k, v in arrays.items() if not k.startswith("adam.")})
    src_vocab = Vocab.load(args.vocab_src)
    tgt_vocab = Vocab.load(args.vocab_tgt)
    tokens = normalize(args.text).split()[: config.max_len - 1]
    src_ids = src_vocab.encode_tokens(tokens) + [EOS_ID]
    out_ids = greedy_decode(params, np.array(src_ids), max_out_len=args.max_out_len)
    print(" ".join(tgt_vocab.decode_ids(out_ids)))
    return EXIT_OK


def _cmd_count_params(args) -> int:
    config = ModelConfig(
        d_model=args.d_model, n_heads=args.heads, n_layers=args.layers,
        dropout=args.dropout, src_vocab_size=args.src_vocab,
        tgt_vocab_size=args.tgt_vocab, max_len=args.max_len,
    )
    n = count_params(config)
    print(f"{n} ({n / 1e6:.2f}M)")
    return EXIT_OK


_COMMANDS = {
    "prepare": _cmd_prepare,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "resume": _cmd_resume,
    "report": _cmd_report,
    "translate": _cmd_translate,
    "count-params": _cmd_count_params,
}


def main(argv=None) -> int:
    global _stop_requested
    _stop_requested = False
    args = build_parser().parse_args(argv)
    previous = signal.getsignal(signal.SIGTERM)
    signal.signal(signal.SIGTERM, _request_stop)
    try:
        return _COMMANDS[args.command](args)
    except (KeyboardInterrupt, SweepInterrupted):
        print("interrupted; state checkpointed, use `deskmt resume`", file=sys.stderr)
        return EXIT_INTERRUPTED
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DegenerateBatchError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (IntegrityError, CorruptionError, ContractError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    finally:
        signal.signal(signal.SIGTERM, previous)


if __name__ == "__main__":
    sys.exit(main())
