"""Immutable undirected graph container, edge-list ingestion, synthetic
generators, and solution-quality scoring.

Graphs use dense 0-based node ids and a CSR-style adjacency layout so that
boolean masks over ``node_count`` index directly. Selections are plain numpy
boolean masks; metrics live in :class:`SolutionMetrics`.
"""

from __future__ import annotations

import hashlib
import heapq
import logging
from dataclasses import dataclass
from pathlib import Path

import networkx as nx
import numpy as np

__all__ = [
    "Graph",
    "Selection",
    "SolutionMetrics",
    "EdgeListFormatError",
    "load_edge_list",
    "write_edge_list",
    "generate_regular",
    "evaluate_solution",
    "repair_selection",
]

logger = logging.getLogger(__name__)

# A Selection is a boolean mask over a graph's node ids.
Selection = np.ndarray

DEFAULT_CONFLICT_PENALTY = 2.0


class EdgeListFormatError(ValueError):
    """Raised for malformed edge-list files (message carries the line number)."""


@dataclass(frozen=True)
class Graph:
    """Simple undirected graph with dense integer node ids.

    Attributes
    ----------
    node_count : int
        Number of nodes; ids are 0..node_count-1.
    edges : ndarray, shape (m, 2)
        Unique undirected edges with u < v, lexicographically sorted.
    indptr, indices : ndarray
        CSR adjacency; neighbors of ``v`` are
        ``indices[indptr[v]:indptr[v+1]]``, sorted ascending.
    degree : ndarray, shape (n,)
        Per-node degree.
    original_ids : ndarray or None
        Dense-id -> source-id map kept by the edge-list loader (sidecar);
        None for graphs built with dense ids.
    """

    node_count: int
    edges: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    degree: np.ndarray
    original_ids: np.ndarray | None = None

    @classmethod
    def from_edges(
        cls,
        node_count: int,
        edges,
        original_ids: np.ndarray | None = None,
    ) -> Graph:
        """Build a graph from an iterable of (u, v) pairs.

        Pairs are canonicalized to u < v, deduplicated, and sorted. Self-loops
        and out-of-range ids raise ValueError.
        """
        if node_count < 0:
            raise ValueError(f"node_count must be non-negative, got {node_count}")
        uv = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                        dtype=np.int64)
        if uv.size == 0:
            uv = np.empty((0, 2), dtype=np.int64)
        if uv.ndim != 2 or uv.shape[1] != 2:
            raise ValueError("edges must be an (m, 2) array of node pairs")
        if uv.size:
            if uv.min() < 0 or uv.max() >= node_count:
                raise ValueError("edge endpoint out of range")
            if np.any(uv[:, 0] == uv[:, 1]):
                raise ValueError("self-loops are not allowed")
            uv = np.sort(uv, axis=1)
            uv = np.unique(uv, axis=0)

        n = node_count
        deg = np.zeros(n, dtype=np.int64)
        if uv.size:
            deg += np.bincount(uv[:, 0], minlength=n)
            deg += np.bincount(uv[:, 1], minlength=n)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(deg, out=indptr[1:])
        if uv.size:
            src = np.concatenate([uv[:, 0], uv[:, 1]])
            dst = np.concatenate([uv[:, 1], uv[:, 0]])
            order = np.lexsort((dst, src))  # yields sorted neighbor segments
            indices = dst[order]
        else:
            indices = np.zeros(0, dtype=np.int64)
        return cls(n, uv, indptr, indices, deg, original_ids)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def neighbors(self, v: int) -> np.ndarray:
        """Sorted neighbor ids of ``v`` (read-only view)."""
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def content_hash(self) -> str:
        """SHA-256 digest of (node_count, canonical edge list)."""
        h = hashlib.sha256()
        h.update(str(self.node_count).encode())
        h.update(np.ascontiguousarray(self.edges).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class SolutionMetrics:
    """Quality measures for one selection.

    ``conflict_rate`` is conflicts divided by set size (0 for an empty set);
    ``score`` is ``set_size - conflict_penalty * conflict_count``.
    """

    set_size: int
    conflict_count: int
    conflict_rate: float
    score: float
    runtime_s: float = 0.0


def _parse_tokens(line: str, lineno: int) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 2:
        raise EdgeListFormatError(
            f"line {lineno}: expected two integer tokens, got {len(parts)}"
        )
    try:
        return int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise EdgeListFormatError(f"line {lineno}: non-integer token ({exc})") from None


def load_edge_list(path: str | Path) -> Graph:
    """Load an undirected graph from a SNAP-style edge-list file.

    One edge per line as two whitespace-separated integers; lines starting
    with '#' are comments. The file is treated as undirected regardless of
    source directionality: mirrored pairs collapse to one edge. Node ids are
    remapped to a dense 0-based range in sorted order of the source ids; the
    dense -> source map is kept on ``Graph.original_ids``. Dropped self-loops
    and duplicate edges are counted and logged as a warning.

    Raises
    ------
    EdgeListFormatError
        On a malformed line (message names the line number) or when the file
        yields an empty graph.
    """
    path = Path(path)
    raw: list[tuple[int, int]] = []
    self_loops = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            u, v = _parse_tokens(line, lineno)
            if u == v:
                self_loops += 1
                continue
            raw.append((u, v))

    if not raw:
        raise EdgeListFormatError(f"{path}: no edges found (empty graph rejected)")

    arr = np.asarray(raw, dtype=np.int64)
    ids = np.unique(arr)  # sorted source ids -> dense rank
    dense = np.searchsorted(ids, arr)
    dense.sort(axis=1)
    uniq = np.unique(dense, axis=0)
    duplicates = dense.shape[0] - uniq.shape[0]
    if self_loops or duplicates:
        logger.warning(
            "%s: dropped %d self-loop(s) and %d duplicate edge(s)",
            path.name, self_loops, duplicates,
        )
    return Graph.from_edges(len(ids), uniq, original_ids=ids)


def write_edge_list(g: Graph, path: str | Path) -> None:
    """Write ``g`` in the same edge-list format the loader reads.

    Note: isolated nodes are not representable in edge-list form.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# nodes={g.node_count} edges={g.num_edges}\n")
        for u, v in g.edges:
            fh.write(f"{u} {v}\n")


def generate_regular(n: int, d: int, seed: int) -> Graph:
    """Generate a simple random d-regular graph on ``n`` nodes.

    Deterministic for a fixed seed. Requires n*d even and d < n.
    """
    if d < 0 or d >= n:
        raise ValueError(f"degree must satisfy 0 <= d < n, got d={d}, n={n}")
    if (n * d) % 2 != 0:
        raise ValueError(f"n*d must be even, got n={n}, d={d}")
    gnx = nx.random_regular_graph(d, n, seed=seed)
    return Graph.from_edges(n, list(gnx.edges()))


def _require_mask(g: Graph, sel) -> np.ndarray:
    mask = np.asarray(sel, dtype=bool)
    if mask.shape != (g.node_count,):
        raise ValueError(
            f"selection sized {mask.shape} does not match graph with "
            f"{g.node_count} nodes"
        )
    return mask


def evaluate_solution(
    g: Graph,
    sel: Selection,
    conflict_penalty: float = DEFAULT_CONFLICT_PENALTY,
    runtime_s: float = 0.0,
) -> SolutionMetrics:
    """Score a selection: set size, conflicting edges, rate, and penalty score."""
    mask = _require_mask(g, sel)
    set_size = int(mask.sum())
    if g.num_edges:
        conflicts = int(np.count_nonzero(mask[g.edges[:, 0]] & mask[g.edges[:, 1]]))
    else:
        conflicts = 0
    rate = conflicts / set_size if set_size > 0 else 0.0
    score = set_size - conflict_penalty * conflicts
    return SolutionMetrics(set_size, conflicts, rate, score, runtime_s)


def repair_selection(g: Graph, sel: Selection) -> Selection:
    """Shrink a selection to a valid independent set.

    While any edge has both endpoints chosen, unselect the node with the most
    chosen neighbors (ties broken by higher degree, then higher id). The
    result is conflict-free and a subset of the input selection.
    """
    chosen = _require_mask(g, sel).copy()
    n = g.node_count
    cnt = np.zeros(n, dtype=np.int64)
    if g.num_edges:
        both = chosen[g.edges[:, 0]] & chosen[g.edges[:, 1]]
        conflict_edges = g.edges[both]
        np.add.at(cnt, conflict_edges[:, 0], 1)
        np.add.at(cnt, conflict_edges[:, 1], 1)

    # lazy max-heap keyed by (chosen-neighbor count, degree, id), all descending
    heap = [(-cnt[v], -g.degree[v], -v) for v in np.flatnonzero(cnt > 0)]
    heapq.heapify(heap)
    while heap:
        negc, _, negv = heapq.heappop(heap)
        v = -negv
        if not chosen[v] or cnt[v] == 0:
            continue
        if cnt[v] != -negc:  # stale entry: reinsert with the current count
            heapq.heappush(heap, (-cnt[v], -g.degree[v], -v))
            continue
        chosen[v] = False
        cnt[v] = 0
        for u in g.neighbors(v):
            if chosen[u] and cnt[u] > 0:
                cnt[u] -= 1
    return chosen
