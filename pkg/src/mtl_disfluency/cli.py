"""Command-line entry point: ``mtl-disfluency {gen,train,eval,tag,inspect}``.

Exit codes: 0 success, 1 usage, 2 data or format problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path
from typing import TextIO

from .corpus import build_vocab, dump_corpus, load_embeddings, read_corpus
from .errors import (
    CheckpointError,
    ConfigError,
    FormatError,
    MalformedAnnotation,
    MalformedTags,
    NumericalError,
    ParseError,
    UsageError,
)
from .evaluation import evaluate
from .incremental import IncrementalTagger, format_stream
from .model import LossMode, ModelConfig, TaggerModel
from .synthetic import GenConfig, generate
from .training import TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

_DATA_ERRORS = (ParseError, FormatError, CheckpointError, MalformedTags, MalformedAnnotation)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2, which we reserve for data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _open_out(path: str) -> TextIO:
    return sys.stdout if path == "-" else open(path, "w", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------- gen


def cmd_gen(args: argparse.Namespace) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(GenConfig)}
    if args.config == "-":
        cfg = GenConfig.from_text("", **overrides)
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = GenConfig.from_file(path, **overrides)
    text = f"# seed: {cfg.seed}\n" + dump_corpus(generate(cfg))
    out = _open_out(args.out)
    try:
        out.write(text)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


# ---------------------------------------------------------------- train


def _read(path: str):
    if not Path(path).is_file():
        raise UsageError(f"corpus file not found: {path}")
    return read_corpus(path)


def cmd_train(args: argparse.Namespace) -> int:
    model_cfg = ModelConfig(
        tasks=args.tasks,
        embed_dim=args.embed_dim,
        hidden=args.hidden,
        ff_dim=args.ff_dim,
        lm_dim=args.lm_dim,
        vocab_cap=args.vocab_cap,
        use_timing=args.timing,
        seed=args.seed,
        dropout=args.dropout,
    )
    loss = LossMode.naive(args.alpha) if args.loss == "naive" else LossMode.uncertainty(model_cfg.tasks)
    train_cfg = TrainConfig(
        max_epochs=args.epochs,
        patience=args.patience,
        seed=args.seed,
        learning_rate=args.lr,
        window=args.window,
    )
    train_set = _read(args.corpus)
    dev_set = _read(args.dev)
    embeddings = None
    if args.embeddings:
        vocab = build_vocab(train_set, model_cfg.vocab_cap)
        with open(args.embeddings, encoding="utf-8") as stream:
            embeddings = load_embeddings(stream, vocab, model_cfg.embed_dim, args.seed)

    def progress(rec):
        if not args.quiet:
            eta = " ".join(f"eta.{t}={v:.4f}" for t, v in rec.eta.items())
            mark = " *" if rec.improved else ""
            print(f"epoch {rec.epoch} train={rec.train_loss:.4f} dev={rec.dev_loss:.4f} {eta}{mark}".rstrip(),
                  file=sys.stderr, flush=True)

    model, history = train(train_set, dev_set, model_cfg, loss, train_cfg, embeddings, progress)
    model.save(args.out)
    print(f"seed={args.seed}")
    print(f"tasks={','.join(model.tasks)}")
    print(f"loss={model.loss_mode.kind}")
    print(f"epochs={len(history.epochs)}")
    print(f"best_epoch={history.best_epoch}")
    print(f"stopped_early={str(history.stopped_early).lower()}")
    print(f"checkpoint={args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args: argparse.Namespace) -> int:
    model = TaggerModel.load(args.model)
    dialogues = _read(args.corpus)
    seed = model.config.seed if args.seed is None else args.seed
    stream = None
    if args.stream:
        if not args.incremental:
            raise UsageError("--stream needs --incremental")
        stream = _open_out(args.stream)

    def dump(dialogue, log):
        stream.write(f"# dialogue: {dialogue.id}\n")
        for t, entry in enumerate(log.entries, start=1):
            for line in format_stream(t, entry, model.tasks):
                stream.write(line + "\n")
        stream.write("\n")

    try:
        report = evaluate(
            model, dialogues, incremental=args.incremental, seed=seed, ftd_origin=args.ftd_origin,
            on_replay=dump if stream is not None else None,
        )
    finally:
        if stream is not None and stream is not sys.stdout:
            stream.close()
    print(report.to_table() if args.table else report.to_kv())
    return EXIT_OK


# ---------------------------------------------------------------- tag


def _parse_line(line: str, timing: bool) -> tuple[str, int | None]:
    cols = line.split("\t")
    if len(cols) not in (1, 2, 5):
        raise ValueError(f"expected 'token[<TAB>duration]', got {len(cols)} columns")
    token = cols[0]
    if not token or any(ch.isspace() for ch in token):
        raise ValueError(f"bad token {token!r}")
    if not timing or len(cols) == 1 or cols[1] == "-":
        return token, None
    try:
        duration = int(cols[1])
    except ValueError:
        raise ValueError(f"bad duration {cols[1]!r}") from None
    if duration < 0:
        raise ValueError(f"negative duration {duration}")
    return token, duration


def run_tagger(model: TaggerModel, lines, out: TextIO, err: TextIO, timing: bool = False) -> int:
    """Stream labels for ``token[<TAB>duration]`` lines.

    A blank line ends the current stream; ``#`` lines are echoed (so a
    corpus file can be piped straight in).  Bad lines are reported and skipped.
    """
    tagger = IncrementalTagger(model)
    rejected = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            if tagger.consumed:
                tagger.end_of_stream()
                tagger = IncrementalTagger(model)
            out.write("\n")
            out.flush()
            continue
        if line.startswith("#"):
            out.write(line + "\n")
            out.flush()
            continue
        try:
            token, duration = _parse_line(line, timing)
        except ValueError as exc:
            print(f"line {lineno}: {exc}", file=err, flush=True)
            rejected += 1
            continue
        labels = tagger.consume_word(token, duration)
        for row in format_stream(tagger.consumed, labels, model.tasks):
            out.write(row + "\n")
        out.flush()
    return EXIT_DATA if rejected else EXIT_OK


def cmd_tag(args: argparse.Namespace) -> int:
    model = TaggerModel.load(args.model)
    return run_tagger(model, sys.stdin, sys.stdout, sys.stderr, args.timing)


# ---------------------------------------------------------------- inspect


def cmd_inspect(args: argparse.Namespace) -> int:
    model = TaggerModel.load(args.model)
    cfg = model.config
    print(f"tasks={','.join(model.tasks)}")
    print(f"seed={cfg.seed}")
    for name in ("embed_dim", "hidden", "ff_dim", "lm_dim", "vocab_cap", "use_timing", "dropout"):
        print(f"{name}={getattr(cfg, name)}")
    print(f"vocab_size={len(model.vocab)}")
    for task, alphabet in model.alphabets.items():
        if task in model.tagging_tasks:
            print(f"labels.{task}={len(alphabet)}")
    print(f"loss={model.loss_mode.kind}")
    if model.loss_mode.kind == "naive":
        print(f"alpha={model.loss_mode.alpha!r}")
    sigmas = model.loss_mode.sigmas()
    for task, p in model.loss_mode.eta.items():
        print(f"eta.{task}={float(p.data)!r}")
        print(f"sigma.{task}={sigmas[task]!r}")
    groups: dict[str, int] = {}
    for name, p in model.named_parameters().items():
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + p.data.size
    for group, n in groups.items():
        print(f"params.{group}={n}")
    print(f"params.total={sum(groups.values())}")
    return EXIT_OK


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mtl-disfluency", description="Incremental multi-task disfluency tagger.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic corpus")
    p.add_argument("config", help="key = value config file, or '-' for defaults")
    p.add_argument("out", help="output corpus path, or '-' for stdout")
    for f in fields(GenConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name == "reparandum_weights":
            p.add_argument(flag, dest=f.name, metavar="W1,...,W8")
        elif f.name in ("seed", "num_dialogues", "min_utterances", "max_utterances", "max_insertion_points"):
            p.add_argument(flag, dest=f.name, type=int)
        else:
            p.add_argument(flag, dest=f.name, type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("corpus")
    p.add_argument("dev")
    p.add_argument("--tasks", default="disf,uttseg,pos,lm")
    p.add_argument("--loss", choices=("naive", "uncertainty"), default="uncertainty")
    p.add_argument("--alpha", type=float, default=1.0, help="LM weight for the naive loss")
    p.add_argument("--timing", action="store_true", help="add word duration as an input feature")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--patience", type=int, default=7)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--window", type=int, default=100)
    p.add_argument("--embed-dim", type=int, default=50)
    p.add_argument("--hidden", type=int, default=200)
    p.add_argument("--ff-dim", type=int, default=100)
    p.add_argument("--lm-dim", type=int, default=50)
    p.add_argument("--vocab-cap", type=int, default=7000)
    p.add_argument("--dropout", type=float, default=0.0, help="training-time dropout rate")
    p.add_argument("--embeddings", help="whitespace-separated word vectors")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a model on a corpus")
    p.add_argument("model")
    p.add_argument("corpus")
    p.add_argument("--incremental", action="store_true", help="also replay word by word for EO and FTD")
    p.add_argument("--stream", help="with --incremental, write every prefix's labels here")
    p.add_argument("--seed", type=int, help="seed shown in the report (default: the model's)")
    p.add_argument("--ftd-origin", type=int, choices=(0, 1), default=0)
    p.add_argument("--table", action="store_true", help="aligned table instead of key=value lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tag", help="tag tokens read from stdin, one per line")
    p.add_argument("model")
    p.add_argument("--timing", action="store_true", help="read durations from the second column")
    p.set_defaults(func=cmd_tag)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
