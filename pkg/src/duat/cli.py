"""Command-line entry point: ``duat {build-graph,train,eval,sweep,ablate}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .corpus import CleaningRules, CorpusError, load_corpus, load_labels, load_stop_words, write_labels
from .engine import NonFiniteError, ParamFormatError
from .graph import GraphFormatError, build_graph, collect_window_stats, load_graph, save_graph
from .model import OneHotFeatures, load_features, load_model, save_model
from .train import (
    MetricsHistory,
    TrainConfig,
    TrainedModel,
    ablate,
    evaluate,
    hop_sweep,
    summarize_ablation,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LABELS_SUFFIX = ".labels.tsv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message.replace("\n", " "))


def write_metrics(history: MetricsHistory, path) -> None:
    """Truncate ``path`` and write one JSON object per epoch."""
    Path(path).write_text(history.to_jsonl(), encoding="utf-8")


def read_metrics(path) -> MetricsHistory:
    return MetricsHistory.from_jsonl(Path(path).read_text("utf-8"))


# -- argument types -----------------------------------------------------------


def _ranged(kind, lo=None, hi=None, lo_open=False, hi_open=False):
    def parse(text):
        try:
            value = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {kind.__name__}, got {text!r}") from None
        if lo is not None and (value < lo or (lo_open and value == lo)):
            raise argparse.ArgumentTypeError(f"{value} is below the allowed range")
        if hi is not None and (value > hi or (hi_open and value == hi)):
            raise argparse.ArgumentTypeError(f"{value} is above the allowed range")
        return value

    return parse


def _int_list(allowed=None):
    def parse(text):
        try:
            values = [int(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
        if not values or (allowed is not None and any(v not in allowed for v in values)):
            raise argparse.ArgumentTypeError(f"values must be drawn from {sorted(allowed)}" if allowed else "empty list")
        return values

    return parse


def _default_seed() -> int:
    raw = os.environ.get("DUAT_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DUAT_SEED: expected an integer, got {raw!r}") from None


# -- parser ---------------------------------------------------------------------


def _add_data_flags(p):
    p.add_argument("--graph", required=True, help="graph file written by build-graph")
    p.add_argument("--labels", default=None, help=f"labels file; unset means <graph>{LABELS_SUFFIX}")
    p.add_argument("--features", default="one-hot", help="'one-hot' or a .npy/.txt node-feature matrix")


def _add_train_flags(p, fanout_default=70, with_hops=True):
    p.add_argument("--heads", type=_ranged(int, 1), default=8, help="attention heads")
    p.add_argument("--dim", type=_ranged(int, 1), default=64, help="output width per head")
    if with_hops:
        p.add_argument("--hops", type=_ranged(int, 1, 3), default=1, help="hop count c")
    p.add_argument("--fanout", type=_ranged(int, 1), default=fanout_default, help="neighbors sampled per node per hop")
    p.add_argument("--lr", type=_ranged(float, 0), default=0.05, help="learning rate")
    p.add_argument("--dropout", type=_ranged(float, 0, 1, hi_open=True), default=0.3, help="dropout rate")
    p.add_argument("--momentum", type=_ranged(float, 0, 1, hi_open=True), default=0.9, help="momentum coefficient")
    p.add_argument("--epochs", type=_ranged(int, 1), default=300, help="training epochs")
    p.add_argument("--l2", type=_ranged(float, 0), default=5e-4, help="L2 penalty weight")
    p.add_argument("--batch-size", type=_ranged(int, 1), default=10, help="training centers per batch")
    p.add_argument("--subgraph-size", type=_ranged(int, 0), default=200, help="distinct-node cap per batch (0 = none)")
    p.add_argument("--leaky-slope", type=_ranged(float, 0), default=0.2, help="LeakyReLU negative slope")
    p.add_argument("--val-frac", type=_ranged(float, 0, 1, hi_open=True), default=0.0, help="train fraction held out for validation")
    p.add_argument("--seed", type=int, default=None, help="random seed; unset means $DUAT_SEED, else 0")
    p.add_argument("--wall-clock", action="store_true", help="record measured seconds per epoch (metrics no longer reproducible)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="duat", description=__doc__, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-graph", help="build a text graph from a corpus", formatter_class=fmt)
    p.add_argument("--texts", required=True, help="one document per line")
    p.add_argument("--meta", required=True, help="id<TAB>split<TAB>label per line")
    p.add_argument("--out", required=True, help="output graph file")
    p.add_argument("--window", type=_ranged(int, 1), default=20, help="sliding window size")
    p.add_argument("--min-freq", type=_ranged(int, 1), default=5, help="minimum document frequency")
    p.add_argument("--stopwords", default=None, help="stop-word file; unset means the bundled English list")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--arm", choices=("dual", "plain"), default="dual", help="dual attention or plain convolution")
    p.add_argument("--metrics", default=None, help="JSON-lines metrics output")
    p.add_argument("--save", default=None, help="model checkpoint output")

    p = sub.add_parser("eval", help="evaluate a saved model", formatter_class=fmt)
    _add_data_flags(p)
    p.add_argument("--model", required=True, help="checkpoint written by train --save")
    p.add_argument("--split", choices=("train", "test"), default="test", help="documents to score")

    p = sub.add_parser("sweep", help="train one model per hop count", formatter_class=fmt)
    _add_data_flags(p)
    _add_train_flags(p, fanout_default=10, with_hops=False)
    p.add_argument("--hops", type=_int_list({1, 2, 3}), default=[1, 2, 3], help="comma-separated hop counts")
    p.add_argument("--out", default=None, help="JSON-lines table output")

    p = sub.add_parser("ablate", help="dual attention vs plain convolution", formatter_class=fmt)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--seeds", type=_int_list(), default=[0], help="comma-separated seeds, one paired run each")
    p.add_argument("--out", default=None, help="JSON-lines output, one object per run")
    return parser


# -- commands -------------------------------------------------------------------


def _load_inputs(args):
    graph = load_graph(args.graph)
    corpus = load_labels(args.labels or args.graph + LABELS_SUFFIX)
    if args.features == "one-hot":
        features = OneHotFeatures(graph.n_nodes)
    else:
        features = load_features(args.features)
    return graph, corpus, features


def _config(args, **overrides) -> TrainConfig:
    seed = args.seed if args.seed is not None else _default_seed()
    values = dict(
        lr=args.lr, momentum=args.momentum, dropout=args.dropout, epochs=args.epochs,
        heads=args.heads, dim=args.dim, fanout=args.fanout, batch_size=args.batch_size,
        subgraph_size=args.subgraph_size, l2=args.l2, seed=seed, leaky_slope=args.leaky_slope,
        val_frac=args.val_frac, record_time=args.wall_clock,
    )
    if isinstance(getattr(args, "hops", None), int):
        values["hops"] = args.hops
    values.update(overrides)
    return TrainConfig(**values)


def _write_jsonl(rows, path):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


def cmd_build_graph(args, out):
    stop = load_stop_words(args.stopwords)
    corpus = load_corpus(args.texts, args.meta, CleaningRules(stop_words=stop), args.min_freq)
    stats = collect_window_stats(corpus, args.window)
    graph = build_graph(corpus, stats)
    save_graph(graph, args.out)
    write_labels(corpus, args.out + LABELS_SUFFIX)
    n_train, n_test = len(corpus.ids("train")), len(corpus.ids("test"))
    print(
        f"docs {corpus.n_docs} (train {n_train}, test {n_test}) words {graph.n_words} "
        f"nodes {graph.n_nodes} edges {graph.n_edges} classes {len(corpus.labels)} windows {stats.total_windows}",
        file=out,
    )


def cmd_train(args, out):
    graph, corpus, features = _load_inputs(args)
    cfg = _config(args, arm=args.arm)
    model, history = train(cfg, corpus, graph, features)
    if args.metrics:
        write_metrics(history, args.metrics)
    if args.save:
        save_model(model.params, args.save, extra={"config": vars(cfg)})
    last = history.records[-1]
    msg = f"epochs {len(history)} loss {last.train_loss:.4f} train_acc {last.train_acc:.4f} test_acc {last.test_acc:.4f}"
    if history.val_acc is not None:
        msg += f" val_acc {history.val_acc:.4f}"
    print(msg, file=out)


def cmd_eval(args, out):
    graph, corpus, features = _load_inputs(args)
    params, extra = load_model(args.model)
    cfg = TrainConfig(**extra.get("config", {}))
    acc = evaluate(TrainedModel(params, cfg), graph, features, corpus, args.split)
    print(f"{args.split}_acc {acc:.4f}", file=out)


def cmd_sweep(args, out):
    graph, corpus, features = _load_inputs(args)
    rows = hop_sweep(_config(args), corpus, graph, features, args.hops)
    if args.out:
        _write_jsonl(rows, args.out)
    print("hops  fanout  train_acc  test_acc", file=out)
    for r in rows:
        print(f"{r['hops']:>4}  {r['fanout']:>6}  {r['train_acc']:>9.4f}  {r['test_acc']:>8.4f}", file=out)


def cmd_ablate(args, out):
    graph, corpus, features = _load_inputs(args)
    rows = ablate(_config(args), corpus, graph, features, args.seeds)
    if args.out:
        _write_jsonl(rows, args.out)
    for arm, mean in summarize_ablation(rows).items():
        print(f"{arm:>5}  mean test_acc {mean:.4f} over {len(args.seeds)} seed(s)", file=out)


COMMANDS = {
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def run(argv=None, out=None, err=None) -> int:
    out = out if out is not None else sys.stdout
    err = err if err is not None else sys.stderr
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help
            return int(exc.code or 0)
        COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"duat: usage error: {exc}", file=err)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"duat: numeric error: {exc}", file=err)
        return EXIT_NUMERIC
    except (CorpusError, GraphFormatError, ParamFormatError, OSError, ValueError) as exc:
        print(f"duat: data error: {exc}", file=err)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
