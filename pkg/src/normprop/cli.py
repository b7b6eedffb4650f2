"""
Command line entry point.

Subcommands: prototypes, gen-sbm, split, train, eval, experiment, bench.
Exit codes: 0 success, 1 usage error, 2 data/config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .graph import GraphFormatError, SbmParams, SplitSpec, homophily, load_graph, sample_few_shot_split, \
    save_graph, sbm_generate
from .model import load_checkpoint, save_checkpoint
from .prototypes import load_prototypes, min_pairwise_cosine, save_prototypes, separation_loss, solve_prototypes
from .tensor import make_rng
from .train import TrainConfig, bench_propagation, evaluate, metrics_csv, run_experiment, scaling_ratios, train

logger = logging.getLogger("normprop")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action="store_const", const=True, default=None)
            continue
        kind = {"int": int, "float": float}.get(str(f.type).split(" ")[0], str)
        p.add_argument(flag, dest=f.name, type=kind, default=None)
    p.add_argument("--metrics", help="write per-epoch metrics CSV here")
    p.add_argument("--summary", help="write summary JSON here")


def build_parser() -> _Parser:
    parser = _Parser(prog="normprop", description="Normalize-then-propagate node classification")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("prototypes", help="solve hyperspherical class prototypes")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-sbm", help="generate a stochastic block model graph")
    p.add_argument("--nodes-per-class", type=int, default=100)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--p-intra", type=float, default=0.05)
    p.add_argument("--p-inter", type=float, default=0.005)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--separation", type=float, default=1.25)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="sample a few-shot split and store it in the graph file")
    p.add_argument("--graph", required=True)
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--val-per-class", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.add_argument("--save-best", help="write the best checkpoint as JSON")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--prototypes", required=True)
    p.add_argument("--mask", choices=("train", "val", "test"), default="test")

    p = sub.add_parser("experiment", help="train over consecutive seeds and aggregate")
    _add_train_flags(p)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--base-seed", type=int, default=0)

    p = sub.add_parser("bench", help="time the propagation chain")
    p.add_argument("--edges", type=int, nargs="+", default=[10_000, 20_000, 40_000, 80_000])
    p.add_argument("--nodes", type=int, default=10_000)
    p.add_argument("--K", type=int, nargs="+", default=[2])
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--repeats", type=int, default=21)
    p.add_argument("--out", help="write the timing table as JSON")
    return parser


def load_config(args: argparse.Namespace) -> TrainConfig:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if not isinstance(doc, dict):
            raise ValueError(f"{args.config}: config must be a JSON object")
    for f in fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            doc[f.name] = value
    return TrainConfig.from_dict(doc)


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text, encoding="utf-8")


def cmd_prototypes(args) -> None:
    protos = solve_prototypes(args.classes, args.dim, args.iters, args.lr, rng=args.seed)
    save_prototypes(protos, args.out)
    print(f"loss {separation_loss(protos):.6f}  min cosine {min_pairwise_cosine(protos):.6f}")


def cmd_gen_sbm(args) -> None:
    params = SbmParams(args.nodes_per_class, args.classes, args.p_intra, args.p_inter,
                       args.feature_dim, args.separation, args.noise)
    g = sbm_generate(params, make_rng(args.seed))
    save_graph(g, args.out)
    print(f"{g.num_nodes} nodes, {g.num_edges} edges, homophily {homophily(g):.4f}")


def cmd_split(args) -> None:
    g = load_graph(args.graph)
    train_m, val_m, test_m = sample_few_shot_split(g, SplitSpec(args.shots, args.val_per_class, args.seed))
    save_graph(g.with_masks(train_m, val_m, test_m), args.out)
    print(f"train {int(train_m.sum())}, val {int(val_m.sum())}, test {int(test_m.sum())}")


def cmd_train(args) -> None:
    cfg = load_config(args)
    result = train(cfg)
    _write(args.metrics, metrics_csv(result.metrics))
    summary = {**result.summary(), "config": cfg.to_dict(), "config_hash": cfg.hash()}
    _write(args.summary, json.dumps(summary, indent=2, sort_keys=True))
    if args.save_best:
        save_checkpoint(result.params, cfg.hyper, args.save_best)
    print(f"best epoch {result.best_epoch}  val {result.val_accuracy:.4f}  test {result.test_accuracy:.4f}")


def cmd_eval(args) -> None:
    params, hyper = load_checkpoint(args.checkpoint)
    g = load_graph(args.graph)
    mask = {"train": g.train_mask, "val": g.val_mask, "test": g.test_mask}[args.mask]
    acc = evaluate(params, g, load_prototypes(args.prototypes), hyper, mask)
    print(f"{args.mask} accuracy {acc:.4f}")


def cmd_experiment(args) -> None:
    cfg = load_config(args)
    summary = run_experiment(cfg, args.runs, args.base_seed)
    if args.metrics:
        parts = [metrics_csv(r.metrics, run=i) for i, r in enumerate(summary.runs)]
        _write(args.metrics, parts[0] + "".join(p.split("\n", 1)[1] for p in parts[1:]))
    _write(args.summary, json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    print(f"{summary.num_runs} runs  mean test {summary.mean_test_acc:.4f} +- {summary.ci95:.4f}")


def cmd_bench(args) -> None:
    rows = bench_propagation(args.edges, dim=args.dim, num_nodes=args.nodes, repeats=args.repeats, Ks=args.K)
    r = scaling_ratios(rows)
    for row in rows:
        print(f"|E|={row.num_edges:>8d}  K={row.K:<3d} {row.seconds * 1e3:9.3f} ms")
    for x in r["edges"]:
        print(f"K={x['K']}: |E| {x['from']} -> {x['to']}  x{x['ratio']:.2f}")
    for x in r["K"]:
        print(f"|E|={x['edges']}: K {x['from']} -> {x['to']}  x{x['ratio']:.2f}")
    if args.out:
        _write(args.out, json.dumps({"rows": [vars(x) for x in rows], "ratios": r}, indent=2))


COMMANDS = {
    "prototypes": cmd_prototypes,
    "gen-sbm": cmd_gen_sbm,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (GraphFormatError, ValueError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
