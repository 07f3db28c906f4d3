"""Stage-1/2 orchestration: worker lanes, LPT scheduling, checkpointing, and
global probability reconstruction.

"Workers" are parallel execution lanes on one host (serial, thread, or
process backends behind one interface). Each lane executes its assigned task
list sequentially, largest subgraph first; lanes share only immutable inputs,
and all bookkeeping is merged in the orchestrator between stages.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gcn
from .coordinator import GlobalMask
from .gcn import Hyperparams
from .graph import Graph
from .partition import PartitionResult

__all__ = [
    "TrainTask",
    "TaskRecord",
    "RunManifest",
    "StageError",
    "WorkerPool",
    "assign_and_bucket",
    "run_stage1",
    "reconstruct_probabilities",
    "derive_seed",
]

logger = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and partial manifest."""

    def __init__(self, stage: str, message: str, manifest: "RunManifest | None" = None):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.manifest = manifest


@dataclass
class TrainTask:
    """One training assignment: a subgraph bound to a worker lane."""

    subgraph_id: int
    subgraph: Graph
    worker_id: int = -1
    status: str = "pending"  # pending | running | done | failed


@dataclass(frozen=True)
class TaskRecord:
    subgraph_id: int
    worker_id: int
    status: str
    epochs: int
    final_loss: float
    wall_time_s: float
    checkpoint_path: str
    error: str = ""


@dataclass
class RunManifest:
    """Reproducibility ledger for one run."""

    dataset_id: str
    graph_hash: str
    partition_summary: dict
    tasks: list[TaskRecord] = field(default_factory=list)
    stage_timings: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


class WorkerPool:
    """Pluggable parallel executor: ``serial``, ``thread``, or ``process``.

    ``run_lanes`` executes one ordered task list per lane with lanes in
    parallel; ``map`` is an order-preserving parallel map. The process
    backend gives real CPU parallelism for training workloads; jobs must be
    module-level functions with picklable arguments.
    """

    def __init__(self, num_workers: int = 1, backend: str = "process"):
        if num_workers < 1:
            raise ValueError(f"num_workers must be >= 1, got {num_workers}")
        if backend not in ("serial", "thread", "process"):
            raise ValueError(f"unknown backend {backend!r}")
        self.num_workers = num_workers
        self.backend = backend if num_workers > 1 else "serial"
        self._executor = None

    def _ensure_executor(self):
        if self._executor is None:
            if self.backend == "thread":
                self._executor = ThreadPoolExecutor(max_workers=self.num_workers)
            elif self.backend == "process":
                self._executor = ProcessPoolExecutor(max_workers=self.num_workers)
        return self._executor

    def run_lanes(self, fn, lanes: list[list]) -> list[list]:
        """Run ``[fn(item) for item in lane]`` per lane, lanes in parallel."""
        lanes = [lane for lane in lanes]
        if self.backend == "serial" or len(lanes) <= 1:
            return [[fn(item) for item in lane] for lane in lanes]
        ex = self._ensure_executor()
        futures = [ex.submit(_lane_runner, fn, lane) for lane in lanes]
        return [f.result() for f in futures]

    def map(self, fn, items: list) -> list:
        if self.backend == "serial" or len(items) <= 1:
            return [fn(item) for item in items]
        ex = self._ensure_executor()
        return list(ex.map(fn, items))

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self) -> "WorkerPool":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _lane_runner(fn, lane: list) -> list:
    return [fn(item) for item in lane]


def derive_seed(base: int, tag: int) -> int:
    """Stable per-task seed derived from a base seed and an integer tag."""
    return int(np.random.SeedSequence([base, tag]).generate_state(1)[0])


def assign_and_bucket(
    subgraphs: list[Graph], num_workers: int
) -> list[list[TrainTask]]:
    """Longest-processing-time assignment of subgraphs to worker lanes.

    Subgraphs are sorted by node count descending (ties by id ascending) and
    each goes to the currently least-loaded lane (load = summed node counts;
    ties to the lowest lane id). Every lane processes its list in the given
    order, largest first.
    """
    if num_workers < 1:
        raise ValueError(f"num_workers must be >= 1, got {num_workers}")
    order = sorted(range(len(subgraphs)),
                   key=lambda i: (-subgraphs[i].node_count, i))
    lanes: list[list[TrainTask]] = [[] for _ in range(num_workers)]
    loads = [0] * num_workers
    for sid in order:
        w = loads.index(min(loads))
        lanes[w].append(TrainTask(subgraph_id=sid, subgraph=subgraphs[sid],
                                  worker_id=w))
        loads[w] += subgraphs[sid].node_count
    return lanes


def _train_one(args: tuple) -> TaskRecord:
    """Train a single subgraph task, retrying once, and write its checkpoint."""
    sid, sub, worker_id, d_in, hp, seed, ckpt_path, dataset_id, restarts = args
    last_error = ""
    for _attempt in (1, 2):
        start = time.perf_counter()
        try:
            model, report = gcn.train_best(sub, d_in, hp, seed,
                                           restarts=restarts, subgraph_id=sid)
            gcn.save_checkpoint(ckpt_path, model, dataset_id,
                                report.final_loss, report.epochs_run)
            return TaskRecord(
                subgraph_id=sid,
                worker_id=worker_id,
                status="done",
                epochs=report.epochs_run,
                final_loss=report.final_loss,
                wall_time_s=time.perf_counter() - start,
                checkpoint_path=str(ckpt_path),
            )
        except Exception as exc:  # retried once on the same lane
            last_error = f"{type(exc).__name__}: {exc}"
            logger.warning("task %d failed (%s); retrying", sid, last_error)
    return TaskRecord(
        subgraph_id=sid, worker_id=worker_id, status="failed", epochs=0,
        final_loss=float("nan"), wall_time_s=0.0, checkpoint_path="",
        error=last_error,
    )


def run_stage1(
    partition: PartitionResult,
    hp: Hyperparams,
    d_in: int,
    base_seed: int,
    dataset_id: str,
    run_dir: str | Path,
    pool: WorkerPool,
    restarts: int = 1,
) -> tuple[RunManifest, dict[int, Path]]:
    """Train every subgraph in parallel lanes and persist checkpoints.

    Checkpoints land at ``<run_dir>/checkpoints/<dataset_id>_<subgraph_id>``.
    A failed task is retried once on its lane; if any task remains failed the
    stage raises :class:`StageError` with the manifest attached for
    diagnosis.
    """
    run_dir = Path(run_dir)
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    lanes = assign_and_bucket(partition.subgraphs, pool.num_workers)
    lane_args = [
        [
            (t.subgraph_id, t.subgraph, t.worker_id, d_in, hp,
             derive_seed(base_seed, t.subgraph_id),
             ckpt_dir / f"{dataset_id}_{t.subgraph_id}", dataset_id, restarts)
            for t in lane
        ]
        for lane in lanes
    ]

    start = time.perf_counter()
    results = pool.run_lanes(_train_one, lane_args)
    elapsed = time.perf_counter() - start

    records = sorted((r for lane in results for r in lane),
                     key=lambda r: r.subgraph_id)
    manifest = RunManifest(
        dataset_id=dataset_id,
        graph_hash="",
        partition_summary={
            "communities": partition.community_count,
            "cross_edges": int(len(partition.cross_edges)),
            "modularity": partition.modularity,
        },
        tasks=records,
        stage_timings={"stage1_s": elapsed},
    )
    failed = [r for r in records if r.status != "done"]
    if failed:
        raise StageError(
            "stage1",
            f"{len(failed)} task(s) failed terminally "
            f"(subgraphs {[r.subgraph_id for r in failed]})",
            manifest,
        )
    paths = {r.subgraph_id: Path(r.checkpoint_path) for r in records}
    return manifest, paths


def reconstruct_probabilities(
    checkpoints: dict[int, Path],
    partition: PartitionResult,
) -> GlobalMask:
    """Rebuild the global probability mask from per-subgraph checkpoints.

    Loads each checkpoint, runs the forward pass, and scatters local
    probabilities through the partition's local->global maps. Every global
    node is written exactly once; cross-node flags come from the partition.
    """
    n = len(partition.assignment)
    prob = np.zeros(n)
    written = np.zeros(n, dtype=np.int64)
    for sid, sub in enumerate(partition.subgraphs):
        path = checkpoints.get(sid)
        if path is None or not Path(path).exists():
            raise StageError("stage2", f"missing checkpoint for subgraph {sid}")
        try:
            model, _meta = gcn.load_checkpoint(path, sub)
        except ValueError as exc:
            raise StageError("stage2", f"subgraph {sid}: {exc}") from exc
        p = gcn.forward(model, sub)
        l2g = partition.local_to_global[sid]
        prob[l2g] = p
        written[l2g] += 1
    if not np.all(written == 1):
        raise StageError(
            "stage2",
            f"coverage violation: {int(np.sum(written != 1))} node(s) not "
            f"written exactly once",
        )
    return GlobalMask(prob=prob, cross_node=partition.cross_node.copy())
