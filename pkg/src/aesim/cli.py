"""Command-line interface: train, eval, predict, export-attention, grad-check.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SequenceBatch, Vocab, find_split, load_glove_text, load_pairs, num_classes_of, tokenize
from .diagnostics import THRESHOLD, run_grad_checks
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .model import DIRECTIONS, EsimConfig, EsimModel
from .train import AdamState, TrainConfig, evaluate, train

logger = logging.getLogger("aesim")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _existing(flag: str, path: Optional[str]) -> Path:
    if path is None or not Path(path).exists():
        raise ConfigError(f"{flag}: path {path!r} does not exist")
    return Path(path)


def _dump(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _pick_dev(data_dir: Path) -> Optional[Path]:
    candidates = find_split(data_dir, "dev")
    if not candidates:
        return None
    # MultiNLI ships matched and mismatched dev sets; select models on matched.
    matched = [p for p in candidates if "mismatched" not in p.name]
    return (matched or candidates)[0]


def cmd_train(args) -> int:
    data_dir = _existing("--data", args.data)
    embeddings_path = _existing("--embeddings", args.embeddings)
    train_files = find_split(data_dir, "train")
    if len(train_files) != 1:
        raise ConfigError(f"--data: expected one training file in {data_dir}, found {len(train_files)}")
    train_pairs = load_pairs(train_files[0])
    if not train_pairs:
        raise DataError(f"{train_files[0]}: no usable training pairs")
    dev_file = _pick_dev(data_dir)
    dev_pairs = load_pairs(dev_file) if dev_file else None
    num_classes = num_classes_of(train_pairs)

    config = EsimConfig(
        variant=args.variant,
        embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim,
        num_classes=num_classes,
        dropout_rate=args.dropout,
        classifier_hidden=args.classifier_hidden or args.hidden_dim,
    )
    train_config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        patience=args.patience,
        seed=args.seed,
        max_len=args.max_len,
    )
    train_config.validate()
    vocab = Vocab.build(train_pairs)
    table = load_glove_text(embeddings_path, vocab, dim=config.embed_dim, seed=args.seed)
    model = EsimModel(config, vocab=vocab, embeddings=table, seed=args.seed)
    state = AdamState(lr=args.lr)
    report, _ = train(model, train_pairs, dev_pairs, train_config, state)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, state, out / "best.ckpt", seed=args.seed)
    doc = report.to_dict()
    timing = doc.pop("wall_time")
    doc.update(variant=config.variant, train_file=train_files[0].name, dev_file=dev_file.name if dev_file else None)
    _dump(doc, out / "report.json")
    _dump({"wall_time": timing}, out / "timing.json")
    print(f"best_epoch={report.best_epoch} acc={report.best_accuracy if report.best_accuracy is not None else float('nan'):.4f}")
    return EXIT_OK


def _eval_files(paths: Sequence[str]) -> list[Path]:
    files = []
    for raw in paths:
        path = _existing("--data", raw)
        files.extend(find_split(path, "dev") if path.is_dir() else [path])
    if not files:
        raise ConfigError("--data: no evaluation files found")
    return files


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(_existing("--checkpoint", args.checkpoint))
    files = _eval_files(args.data)
    for path in files:
        pairs = load_pairs(path)
        if not pairs:
            raise DataError(f"{path}: no usable pairs")
        if num_classes_of(pairs) != model.config.num_classes:
            raise ConfigError(
                f"{path.name} has {num_classes_of(pairs)} classes but the checkpoint predicts "
                f"{model.config.num_classes}"
            )
        acc = evaluate(model, pairs, args.batch_size, args.max_len)
        suffix = f" file={path.name}" if len(files) > 1 else ""
        print(f"acc={acc:.4f}{suffix}")
    return EXIT_OK


def _tokens(flag: str, text: str) -> list[str]:
    tokens = tokenize(text)
    if not tokens:
        raise DataError(f"{flag}: sentence contains no tokens")
    return tokens


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(_existing("--checkpoint", args.checkpoint))
    premise = _tokens("--premise", args.premise)
    hypothesis = _tokens("--hypothesis", args.hypothesis)
    p = SequenceBatch.from_ids([model.vocab.encode(premise, args.max_len)])
    q = SequenceBatch.from_ids([model.vocab.encode(hypothesis, args.max_len)])
    probs = model.predict_proba(p, q)[0]
    labels = model.labels
    print(json.dumps({"label": labels[int(np.argmax(probs))], "probs": dict(zip(labels, probs.tolist()))}))
    return EXIT_OK


def cmd_export_attention(args) -> int:
    model, _ = load_checkpoint(_existing("--checkpoint", args.checkpoint))
    export = model.export_alignment(
        _tokens("--premise", args.premise), _tokens("--hypothesis", args.hypothesis), args.direction
    )
    doc = export.to_json()
    if args.out:
        Path(args.out).write_text(doc + "\n", encoding="utf-8")
    else:
        print(doc)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_grad_checks(seed=args.seed, corrupt=args.corrupt)
    failed = [name for name, err in results.items() if not err < THRESHOLD]
    for name, err in results.items():
        print(f"{'PASS' if err < THRESHOLD else 'FAIL'} {name} max_rel_error={err:.3e}")
    print(json.dumps({"threshold": THRESHOLD, "layers": results, "passed": not failed}))
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="aesim", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--precision", choices=("f32", "f64"), default="f64")
        p.add_argument("--batch-size", type=int, default=128)
        p.add_argument("--max-len", type=int, default=64)

    p = sub.add_parser("train", help="train a model and keep the best dev checkpoint")
    common(p)
    p.add_argument("--variant", choices=("esim", "aesim"), default="aesim")
    p.add_argument("--data", required=True, help="directory holding *train*.jsonl|tsv and *dev* files")
    p.add_argument("--embeddings", required=True, help="GloVe-format text file")
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", type=int, default=300)
    p.add_argument("--hidden-dim", type=int, default=300)
    p.add_argument("--classifier-hidden", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.0005)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print accuracy on one or more data files")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one sentence pair")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--premise", required=True)
    p.add_argument("--hypothesis", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-attention", help="write the soft-alignment matrix of a pair as JSON")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--premise", required=True)
    p.add_argument("--hypothesis", required=True)
    p.add_argument("--direction", choices=DIRECTIONS, default="premise_rows")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("grad-check", help="finite-difference check of every layer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_grad_check)
    return parser


def _thread_limit():
    threads = os.environ.get("AESIM_THREADS")
    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit(), T.precision(getattr(args, "precision", "f64")):
            return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
