"""Command-line front end.

Subcommands: ``gen``, ``partition``, ``solve``, ``bench``, ``exact``,
``greedy``. Flags mirror :class:`parmis.pipeline.RunConfig`; a JSON config
file given via ``--config`` overrides flag values. Exit codes: 0 success,
1 usage error, 2 stage failure, 3 exact-oracle size guard.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from .baselines import OracleSizeError, exact_mis, greedy_mis
from .graph import (
    evaluate_solution,
    generate_regular,
    load_edge_list,
    write_edge_list,
)
from .partition import louvain, partition_report
from .pipeline import RunConfig, bench, default_workers, solve
from .runtime import StageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_STAGE = 2
EXIT_SIZE_GUARD = 3


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the documented usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_input_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="edge-list file (SNAP format)")
    p.add_argument("--gen-nodes", type=int, help="generate: node count")
    p.add_argument("--gen-degree", type=int, help="generate: regular degree")
    p.add_argument("--seed", type=int, default=0)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    base = RunConfig()
    p.add_argument("--config", help="JSON config file; overrides flags")
    p.add_argument("--dataset-id")
    p.add_argument("--num-workers", type=int, default=default_workers(),
                   help="parallel lanes (env PARMIS_WORKERS sets the default)")
    p.add_argument("--backend", choices=["serial", "thread", "process"],
                   default=base.backend)
    p.add_argument("--out-dir", default=base.out_dir)
    p.add_argument("--report-format", choices=["text", "json", "both"],
                   default=base.report_format)
    p.add_argument("--max-levels", type=int, default=base.max_levels)
    p.add_argument("--max-community-size", type=int, default=None)
    p.add_argument("--d-in", type=int, default=base.d_in)
    p.add_argument("--alpha", type=float, default=base.alpha)
    p.add_argument("--beta", type=float, default=base.beta)
    p.add_argument("--learning-rate", type=float, default=base.learning_rate)
    p.add_argument("--tolerance", type=float, default=base.tolerance)
    p.add_argument("--patience", type=int, default=base.patience)
    p.add_argument("--max-epochs", type=int, default=base.max_epochs)
    p.add_argument("--temperature", type=float, default=base.temperature)
    p.add_argument("--episodes", type=int, default=base.episodes)
    p.add_argument("--epsilon", type=float, default=base.epsilon)
    p.add_argument("--epsilon-decay", type=float, default=base.epsilon_decay)
    p.add_argument("--epsilon-min", type=float, default=base.epsilon_min)
    p.add_argument("--agent-lr", type=float, default=base.agent_lr)
    p.add_argument("--discount", type=float, default=base.discount)
    p.add_argument("--penalty-coeff", type=float, default=base.penalty_coeff)
    p.add_argument("--finetune-budget", type=int, default=base.finetune_budget)
    p.add_argument("--conflict-penalty", type=float,
                   default=base.conflict_penalty)


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(
        input_path=args.input,
        gen_nodes=args.gen_nodes,
        gen_degree=args.gen_degree,
        dataset_id=args.dataset_id,
        num_workers=args.num_workers,
        backend=args.backend,
        out_dir=args.out_dir,
        report_format=args.report_format,
        seed=args.seed,
        max_levels=args.max_levels,
        max_community_size=args.max_community_size,
        d_in=args.d_in,
        alpha=args.alpha,
        beta=args.beta,
        learning_rate=args.learning_rate,
        tolerance=args.tolerance,
        patience=args.patience,
        max_epochs=args.max_epochs,
        temperature=args.temperature,
        episodes=args.episodes,
        epsilon=args.epsilon,
        epsilon_decay=args.epsilon_decay,
        epsilon_min=args.epsilon_min,
        agent_lr=args.agent_lr,
        discount=args.discount,
        penalty_coeff=args.penalty_coeff,
        finetune_budget=args.finetune_budget,
        conflict_penalty=args.conflict_penalty,
    )
    if args.config:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _load_graph(args: argparse.Namespace, parser: argparse.ArgumentParser):
    if args.input:
        return load_edge_list(args.input)
    if args.gen_nodes is not None and args.gen_degree is not None:
        return generate_regular(args.gen_nodes, args.gen_degree, args.seed)
    parser.error("provide --input or both --gen-nodes and --gen-degree")


def _parse_int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def build_parser() -> _Parser:
    parser = _Parser(prog="parmis",
                     description="Partition-parallel MIS solver")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[], help="generate a random regular graph")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--degree", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="edge-list output path")

    p = sub.add_parser("partition", help="Louvain-partition a graph")
    _add_input_flags(p)
    p.add_argument("--max-levels", type=int, default=16)
    p.add_argument("--max-community-size", type=int, default=None)
    p.add_argument("--out", help="write the partition report here")

    p = sub.add_parser("solve", help="run the full pipeline")
    _add_input_flags(p)
    _add_config_flags(p)

    p = sub.add_parser("bench", help="benchmark over a generator grid")
    p.add_argument("--nodes", default="100,200,500,800,1000",
                   help="comma-separated node counts")
    p.add_argument("--degrees", default="10,20,30,40",
                   help="comma-separated degrees")
    p.add_argument("--samples", type=int, default=10,
                   help="seeds 0..samples-1 per cell")
    p.add_argument("--input", help=argparse.SUPPRESS)
    p.add_argument("--gen-nodes", type=int, help=argparse.SUPPRESS)
    p.add_argument("--gen-degree", type=int, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=0)
    _add_config_flags(p)

    p = sub.add_parser("greedy", help="min-degree greedy baseline")
    _add_input_flags(p)
    p.add_argument("--conflict-penalty", type=float, default=2.0)

    p = sub.add_parser("exact", help="exact solver (small graphs only)")
    _add_input_flags(p)
    p.add_argument("--conflict-penalty", type=float, default=2.0)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command == "gen":
            g = generate_regular(args.nodes, args.degree, args.seed)
            write_edge_list(g, args.out)
            print(f"wrote {g.node_count} nodes, {g.num_edges} edges to {args.out}")
            return EXIT_OK

        if args.command == "partition":
            g = _load_graph(args, parser)
            part = louvain(g, seed=args.seed, max_levels=args.max_levels,
                           max_community_size=args.max_community_size)
            text = partition_report(part)
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
                print(f"{part.community_count} communities "
                      f"(Q={part.modularity:.4f}) -> {args.out}")
            else:
                print(text, end="")
            return EXIT_OK

        if args.command == "solve":
            config = _config_from_args(args)
            report = solve(config)
            print(report.to_text(), end="")
            return EXIT_OK

        if args.command == "bench":
            config = _config_from_args(args)
            rows = bench(
                _parse_int_list(args.nodes),
                _parse_int_list(args.degrees),
                args.samples,
                config,
                out_dir=args.out_dir,
            )
            print(f"{len(rows)} result rows -> {args.out_dir}/results.csv")
            return EXIT_OK

        if args.command in ("greedy", "exact"):
            g = _load_graph(args, parser)
            start = time.perf_counter()
            sel = greedy_mis(g) if args.command == "greedy" else exact_mis(g)
            metrics = evaluate_solution(g, sel, args.conflict_penalty,
                                        runtime_s=time.perf_counter() - start)
            print(f"{args.command}: size={metrics.set_size} "
                  f"conflicts={metrics.conflict_count} "
                  f"time_s={metrics.runtime_s:.3f}")
            return EXIT_OK

    except OracleSizeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE_GUARD
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, ValueError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE

    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
