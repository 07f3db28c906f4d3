"""End-to-end solve and benchmark drivers.

``solve`` runs the full three-stage pipeline on one graph — partition,
parallel subgraph training, probability reconstruction, conflict
coordination — then reports both the raw mask metrics and a repaired (always
conflict-free) selection, next to the greedy baseline. ``bench`` sweeps a
(nodes x degree x seeds) grid and emits plotter-friendly CSV files.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gcn
from .baselines import greedy_mis
from .coordinator import CoordinatorConfig, coordinate
from .graph import (
    Graph,
    SolutionMetrics,
    evaluate_solution,
    generate_regular,
    load_edge_list,
    repair_selection,
)
from .partition import louvain
from .runtime import RunManifest, StageError, WorkerPool, derive_seed, run_stage1, \
    reconstruct_probabilities

__all__ = ["RunConfig", "SolveReport", "solve", "bench", "BENCH_COLUMNS"]

logger = logging.getLogger(__name__)

WORKERS_ENV_VAR = "PARMIS_WORKERS"

BENCH_COLUMNS = ["method", "nodes", "degree", "seed", "mis_size",
                 "conflict_rate", "time_s"]


def default_workers() -> int:
    return int(os.environ.get(WORKERS_ENV_VAR, "2"))


@dataclass
class RunConfig:
    """Everything one run needs; serialized verbatim into manifest and report."""

    # input: either an edge-list path or a regular-graph generator spec
    input_path: str | None = None
    gen_nodes: int | None = None
    gen_degree: int | None = None
    dataset_id: str | None = None
    # execution
    num_workers: int = field(default_factory=default_workers)
    backend: str = "process"
    out_dir: str = "runs"
    report_format: str = "both"  # text | json | both
    seed: int = 0
    # partitioning
    max_levels: int = 16
    max_community_size: int | None = None
    # subgraph model
    d_in: int = 64
    alpha: float = 2.0
    beta: float = 1.0
    learning_rate: float = 0.01
    tolerance: float = 1e-5
    patience: int = 20
    max_epochs: int = 3000
    temperature: float = 1.0
    activation: str = "identity"
    hard_embeddings: bool = False
    train_restarts: int = 3
    # coordination
    episodes: int = 50
    epsilon: float = 0.5
    epsilon_decay: float = 0.9
    epsilon_min: float = 0.05
    agent_lr: float = 0.1
    discount: float = 0.9
    penalty_coeff: float = 2.0
    finetune_budget: int = 3000
    rebuild_restarts: int = 2
    no_improve_limit: int = 5
    # scoring
    conflict_penalty: float = 2.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def hyperparams(self) -> gcn.Hyperparams:
        return gcn.Hyperparams(
            alpha=self.alpha, beta=self.beta,
            learning_rate=self.learning_rate, tolerance=self.tolerance,
            patience=self.patience, max_epochs=self.max_epochs,
            temperature=self.temperature, activation=self.activation,
            hard_embeddings=self.hard_embeddings,
        )

    def coordinator_config(self) -> CoordinatorConfig:
        return CoordinatorConfig(
            episodes=self.episodes, epsilon=self.epsilon,
            epsilon_decay=self.epsilon_decay, epsilon_min=self.epsilon_min,
            learning_rate=self.agent_lr, discount=self.discount,
            penalty_coeff=self.penalty_coeff,
            finetune_budget=self.finetune_budget,
            rebuild_restarts=self.rebuild_restarts,
            no_improve_limit=self.no_improve_limit,
            conflict_penalty=self.conflict_penalty,
            seed=derive_seed(self.seed, 0x5EED),
        )


@dataclass
class SolveReport:
    """Final record of one pipeline run."""

    dataset: dict
    greedy: SolutionMetrics
    raw: SolutionMetrics
    repaired: SolutionMetrics
    timings: dict
    episodes: list[dict]
    subgraph_count: int
    cross_edge_count: int
    config: dict

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "greedy": dataclasses.asdict(self.greedy),
            "raw": dataclasses.asdict(self.raw),
            "repaired": dataclasses.asdict(self.repaired),
            "timings": self.timings,
            "episodes": self.episodes,
            "subgraph_count": self.subgraph_count,
            "cross_edge_count": self.cross_edge_count,
            "config": self.config,
        }

    def to_text(self) -> str:
        d = self.dataset
        lines = [
            f"dataset {d['name']}: {d['nodes']} nodes, {d['edges']} edges",
            f"subgraphs: {self.subgraph_count}  cross edges: {self.cross_edge_count}",
            "",
            f"{'':12s}{'size':>8s}{'conflicts':>11s}{'rate':>9s}{'time_s':>10s}",
        ]
        for name, m in (("greedy", self.greedy), ("raw", self.raw),
                        ("repaired", self.repaired)):
            lines.append(
                f"{name:12s}{m.set_size:8d}{m.conflict_count:11d}"
                f"{m.conflict_rate:9.4f}{m.runtime_s:10.2f}"
            )
        t = self.timings
        lines += [
            "",
            "stage seconds: "
            + "  ".join(f"{k}={t[k]:.3f}" for k in
                        ("partition_s", "stage1_s", "stage2_s", "stage3_s",
                         "total_s")),
            f"episodes run: {len(self.episodes)}",
        ]
        return "\n".join(lines) + "\n"


def _load_input(config: RunConfig, graph: Graph | None) -> tuple[Graph, str]:
    if graph is not None:
        dataset_id = config.dataset_id or f"graph_{graph.content_hash()[:12]}"
        return graph, dataset_id
    if config.input_path is not None:
        g = load_edge_list(config.input_path)
        dataset_id = config.dataset_id or Path(config.input_path).stem
        return g, dataset_id
    if config.gen_nodes is not None and config.gen_degree is not None:
        g = generate_regular(config.gen_nodes, config.gen_degree, config.seed)
        dataset_id = config.dataset_id or (
            f"reg{config.gen_nodes}d{config.gen_degree}s{config.seed}"
        )
        return g, dataset_id
    raise StageError("load", "no input: set input_path or gen_nodes/gen_degree")


def solve(config: RunConfig, graph: Graph | None = None,
          write_outputs: bool = True) -> SolveReport:
    """Run the full pipeline per the configuration.

    Stages: Louvain partition -> parallel subgraph training (checkpoints) ->
    probability reconstruction -> Q-learning coordination -> repair ->
    evaluation. Artifacts go to ``<out_dir>/<dataset_id>/``: ``manifest``
    (JSON), ``report`` (JSON), ``report.txt``. Any stage failure raises
    :class:`StageError` naming the stage; artifacts written so far are
    preserved.
    """
    try:
        g, dataset_id = _load_input(config, graph)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("load", str(exc)) from exc

    run_dir = Path(config.out_dir) / dataset_id
    run_dir.mkdir(parents=True, exist_ok=True)

    t = {}
    greedy_start = time.perf_counter()
    greedy_sel = greedy_mis(g)
    greedy_metrics = evaluate_solution(
        g, greedy_sel, config.conflict_penalty,
        runtime_s=time.perf_counter() - greedy_start,
    )

    pool = WorkerPool(config.num_workers, config.backend)
    try:
        total_start = time.perf_counter()

        stage_start = time.perf_counter()
        try:
            part = louvain(g, seed=config.seed, max_levels=config.max_levels,
                           max_community_size=config.max_community_size)
        except Exception as exc:
            raise StageError("partition", str(exc)) from exc
        t["partition_s"] = time.perf_counter() - stage_start

        stage_start = time.perf_counter()
        manifest, ckpts = run_stage1(
            part, config.hyperparams(), config.d_in, config.seed,
            dataset_id, run_dir, pool, restarts=config.train_restarts,
        )
        t["stage1_s"] = time.perf_counter() - stage_start
        manifest.graph_hash = g.content_hash()
        manifest.config = config.to_dict()

        stage_start = time.perf_counter()
        mask = reconstruct_probabilities(ckpts, part)
        t["stage2_s"] = time.perf_counter() - stage_start

        stage_start = time.perf_counter()
        models = {}
        for sid, sub in enumerate(part.subgraphs):
            model, _ = gcn.load_checkpoint(ckpts[sid], sub)
            models[sid] = model
        best_mask, episode_log = coordinate(
            g, part, models, mask, config.coordinator_config(), pool,
        )
        t["stage3_s"] = time.perf_counter() - stage_start
        t["total_s"] = time.perf_counter() - total_start
    finally:
        pool.close()

    raw_metrics = evaluate_solution(g, best_mask.chosen,
                                    config.conflict_penalty,
                                    runtime_s=t["total_s"])
    repair_start = time.perf_counter()
    repaired_sel = repair_selection(g, best_mask.chosen)
    repair_s = time.perf_counter() - repair_start
    repaired_metrics = evaluate_solution(g, repaired_sel,
                                         config.conflict_penalty,
                                         runtime_s=t["total_s"] + repair_s)

    manifest.stage_timings = dict(t)
    report = SolveReport(
        dataset={"name": dataset_id, "nodes": g.node_count,
                 "edges": g.num_edges},
        greedy=greedy_metrics,
        raw=raw_metrics,
        repaired=repaired_metrics,
        timings=dict(t),
        episodes=episode_log,
        subgraph_count=part.community_count,
        cross_edge_count=int(len(part.cross_edges)),
        config=config.to_dict(),
    )
    if write_outputs:
        _write_outputs(run_dir, manifest, report, config.report_format)
    return report


def _write_outputs(run_dir: Path, manifest: RunManifest, report: SolveReport,
                   fmt: str) -> None:
    with open(run_dir / "manifest", "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")
    if fmt in ("json", "both"):
        with open(run_dir / "report", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    if fmt in ("text", "both"):
        (run_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")


def bench(
    nodes: list[int],
    degrees: list[int],
    samples: int,
    config: RunConfig,
    out_dir: str | Path = "bench",
) -> list[dict]:
    """Run the pipeline plus the greedy baseline over a generator grid.

    One row per (method, nodes, degree, seed) lands in ``results.csv`` with
    columns exactly ``BENCH_COLUMNS``; per-cell aggregates (mean and stddev)
    go to ``aggregate.csv`` and per-figure data files (metric vs graph nodes)
    to ``fig_*.csv``. Per-cell failures are recorded and the sweep continues.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    failures: list[dict] = []

    for n in nodes:
        for d in degrees:
            for seed in range(samples):
                cell = dataclasses.replace(
                    config, gen_nodes=n, gen_degree=d, seed=seed,
                    input_path=None, dataset_id=None,
                    out_dir=str(out_dir / "runs"),
                )
                try:
                    report = solve(cell)
                except Exception as exc:
                    logger.warning("bench cell (n=%d d=%d seed=%d) failed: %s",
                                   n, d, seed, exc)
                    failures.append({"nodes": n, "degree": d, "seed": seed,
                                     "error": str(exc)})
                    continue
                rows.append(_bench_row("greedy", n, d, seed,
                                       report.greedy))
                rows.append(_bench_row("parmis_raw", n, d, seed,
                                       report.raw))
                rows.append(_bench_row("parmis_repaired", n, d, seed,
                                       report.repaired))

    _write_csv(out_dir / "results.csv", BENCH_COLUMNS, rows)
    aggregates = _aggregate(rows)
    agg_cols = ["method", "nodes", "degree", "runs", "mis_size_mean",
                "mis_size_std", "conflict_rate_mean", "conflict_rate_std",
                "time_s_mean", "time_s_std"]
    _write_csv(out_dir / "aggregate.csv", agg_cols, aggregates)
    for metric in ("mis_size", "conflict_rate", "time_s"):
        fig_rows = [
            {"method": a["method"], "degree": a["degree"], "nodes": a["nodes"],
             "mean": a[f"{metric}_mean"], "std": a[f"{metric}_std"]}
            for a in aggregates
        ]
        _write_csv(out_dir / f"fig_{metric}_vs_nodes.csv",
                   ["method", "degree", "nodes", "mean", "std"], fig_rows)
    if failures:
        _write_csv(out_dir / "failures.csv",
                   ["nodes", "degree", "seed", "error"], failures)
    return rows


def _bench_row(method: str, n: int, d: int, seed: int,
               m: SolutionMetrics) -> dict:
    return {"method": method, "nodes": n, "degree": d, "seed": seed,
            "mis_size": m.set_size, "conflict_rate": m.conflict_rate,
            "time_s": m.runtime_s}


def _aggregate(rows: list[dict]) -> list[dict]:
    cells: dict[tuple, list[dict]] = {}
    for row in rows:
        cells.setdefault((row["method"], row["nodes"], row["degree"]),
                         []).append(row)
    out = []
    for (method, n, d), group in sorted(cells.items()):
        entry = {"method": method, "nodes": n, "degree": d,
                 "runs": len(group)}
        for metric in ("mis_size", "conflict_rate", "time_s"):
            values = np.asarray([r[metric] for r in group], dtype=float)
            entry[f"{metric}_mean"] = float(values.mean())
            entry[f"{metric}_std"] = float(values.std())
        out.append(entry)
    return out


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
