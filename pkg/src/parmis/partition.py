"""Community detection and subgraph extraction (pipeline stage 0).

Louvain two-phase optimization: seeded local moves driven by the simplified
modularity gain, then aggregation into a weighted supergraph, repeated until
no move improves. The partition is returned with per-community induced
subgraphs, local<->global id maps, and the cross-edge list the coordinator
consumes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph

__all__ = [
    "CommunityAssignment",
    "PartitionResult",
    "modularity",
    "modularity_gain",
    "modularity_gain_reference",
    "louvain",
    "extract_subgraphs",
    "partition_report",
]

logger = logging.getLogger(__name__)

# A CommunityAssignment maps node id -> dense community id.
CommunityAssignment = np.ndarray

DEFAULT_MAX_LEVELS = 16


@dataclass(frozen=True)
class PartitionResult:
    """A community partition with everything downstream stages need.

    ``subgraphs[c]`` is the induced subgraph of community ``c`` with local
    0-based ids; ``local_to_global[c][i]`` is the global id of local node
    ``i``. ``cross_edges`` holds the global (u, v) pairs whose endpoints lie
    in different communities; ``cross_node`` flags nodes incident to any of
    them. ``level_modularities`` records projected modularity after each
    accepted Louvain level (empty when the assignment came from elsewhere).
    """

    assignment: CommunityAssignment
    subgraphs: list[Graph]
    local_to_global: list[np.ndarray]
    cross_edges: np.ndarray
    cross_node: np.ndarray
    modularity: float
    level_modularities: list[float] = field(default_factory=list)

    @property
    def community_count(self) -> int:
        return len(self.subgraphs)


def modularity(g: Graph, assignment: CommunityAssignment) -> float:
    """Modularity Q of a node-community assignment under unit edge weights.

    Q = sum_c [ S_in_c / (2m) - (S_tot_c / (2m))^2 ] where S_in_c counts each
    internal edge twice and S_tot_c sums member degrees.

    Raises
    ------
    ValueError
        If the graph has no edges (Q undefined).
    """
    m = g.num_edges
    if m == 0:
        raise ValueError("modularity undefined for a graph with no edges")
    a = _require_assignment(g, assignment)
    ncomm = int(a.max()) + 1
    two_m = 2.0 * m
    internal = np.bincount(
        a[g.edges[:, 0]],
        weights=(a[g.edges[:, 0]] == a[g.edges[:, 1]]).astype(float),
        minlength=ncomm,
    )
    sigma_in = 2.0 * internal
    sigma_tot = np.bincount(a, weights=g.degree.astype(float), minlength=ncomm)
    return float(np.sum(sigma_in / two_m - (sigma_tot / two_m) ** 2))


def modularity_gain(sigma_tot: float, k_i: float, k_i_in: float, m: float) -> float:
    """Simplified gain of inserting a node into a community.

    ``sigma_tot`` is the target community's summed degree (node excluded),
    ``k_i`` the node's degree, ``k_i_in`` its edge weight into the community,
    ``m`` the total edge weight of the graph.
    """
    if m <= 0:
        raise ValueError("total edge weight m must be positive")
    return k_i_in / m - (sigma_tot * k_i) / (2.0 * m * m)


def modularity_gain_reference(
    sigma_in: float, sigma_tot: float, k_i: float, k_i_in: float, m: float
) -> float:
    """Insertion gain as the explicit before/after difference of community Q.

    Reference form used by tests to cross-check :func:`modularity_gain`;
    ``sigma_in`` counts internal edges twice and cancels algebraically.
    """
    if m <= 0:
        raise ValueError("total edge weight m must be positive")
    two_m = 2.0 * m
    after = (sigma_in + 2.0 * k_i_in) / two_m - ((sigma_tot + k_i) / two_m) ** 2
    before = sigma_in / two_m - (sigma_tot / two_m) ** 2 - (k_i / two_m) ** 2
    return after - before


class _Level:
    """One weighted Louvain level in flat-array form.

    ``loop[i]`` carries the collapsed internal weight of supernode ``i``
    (counted-twice convention), so ``k[i] = loop[i] + sum of incident edge
    weights`` equals the summed original degrees of its members. ``m`` is the
    total edge weight of the original graph and stays constant across levels.
    """

    def __init__(self, indptr, neigh, weights, loop, m):
        self.indptr = indptr
        self.neigh = neigh
        self.weights = weights
        self.loop = loop
        self.m = m
        self.n = len(loop)
        if len(neigh):
            src = np.repeat(np.arange(self.n), np.diff(indptr))
            incident = np.bincount(src, weights=weights, minlength=self.n)
        else:
            incident = np.zeros(self.n)
        self.k = loop + incident

    @classmethod
    def from_graph(cls, g: Graph) -> _Level:
        weights = np.ones(len(g.indices), dtype=float)
        return cls(g.indptr.copy(), g.indices.copy(), weights,
                   np.zeros(g.node_count, dtype=float), float(g.num_edges))


def _local_moves(level: _Level, order: np.ndarray, validate: bool = False):
    """Phase A: sweep nodes in ``order``, greedily applying positive gains.

    Returns (community array, total number of accepted moves). With
    ``validate`` the predicted gain of every accepted move is checked against
    a recomputed full-Q difference (used by tests; quadratic cost).
    """
    n = level.n
    m = level.m
    k = level.k
    comm = np.arange(n)
    sigma_tot = k.copy()
    total_moves = 0

    def full_q(c):
        return _weighted_modularity(level, c)

    while True:
        moves = 0
        for i in order:
            ci = comm[i]
            # weight from i to each adjacent community
            w_to: dict[int, float] = {}
            for idx in range(level.indptr[i], level.indptr[i + 1]):
                j = level.neigh[idx]
                if j == i:
                    continue
                cj = comm[j]
                w_to[cj] = w_to.get(cj, 0.0) + level.weights[idx]

            sigma_tot[ci] -= k[i]
            stay_gain = modularity_gain(sigma_tot[ci], k[i], w_to.get(ci, 0.0), m)
            best_c = ci
            best_gain = stay_gain
            for cj in sorted(w_to):
                if cj == ci:
                    continue
                gain = modularity_gain(sigma_tot[cj], k[i], w_to[cj], m)
                if gain > best_gain:
                    best_gain = gain
                    best_c = cj

            if best_c != ci:
                if validate:
                    before = full_q(comm)
                sigma_tot[best_c] += k[i]
                comm[i] = best_c
                moves += 1
                if validate:
                    after = full_q(comm)
                    predicted = best_gain - stay_gain
                    if abs((after - before) - predicted) > 1e-9 or predicted <= 0:
                        raise AssertionError(
                            f"move gain mismatch: predicted {predicted}, "
                            f"observed {after - before}"
                        )
            else:
                sigma_tot[ci] += k[i]
        total_moves += moves
        if moves == 0:
            return comm, total_moves


def _weighted_modularity(level: _Level, comm: np.ndarray) -> float:
    two_m = 2.0 * level.m
    ncomm = int(comm.max()) + 1
    sigma_in = np.bincount(comm, weights=level.loop, minlength=ncomm)
    sigma_tot = np.bincount(comm, weights=level.k, minlength=ncomm)
    for i in range(level.n):
        ci = comm[i]
        for idx in range(level.indptr[i], level.indptr[i + 1]):
            j = level.neigh[idx]
            if j != i and comm[j] == ci:
                sigma_in[ci] += level.weights[idx]
    return float(np.sum(sigma_in / two_m - (sigma_tot / two_m) ** 2))


def _aggregate(level: _Level, comm: np.ndarray) -> tuple[_Level, np.ndarray]:
    """Phase B: collapse communities into supernodes with summed weights.

    Returns the aggregated level plus the level-node -> supernode map.
    """
    _, dense = np.unique(comm, return_inverse=True)
    dense = dense.astype(np.int64)
    nc = int(dense.max()) + 1 if len(dense) else 0

    loop = np.bincount(dense, weights=level.loop, minlength=nc)
    if len(level.neigh):
        src_nodes = np.repeat(np.arange(level.n), np.diff(level.indptr))
        csrc = dense[src_nodes]
        cdst = dense[level.neigh]
        intra = csrc == cdst
        # intra arcs appear in both directions -> counted-twice convention
        loop += np.bincount(csrc[intra], weights=level.weights[intra], minlength=nc)
        csrc, cdst, w = csrc[~intra], cdst[~intra], level.weights[~intra]
    else:
        csrc = cdst = np.zeros(0, dtype=np.int64)
        w = np.zeros(0)

    if len(csrc):
        code = csrc * nc + cdst
        uniq, inverse = np.unique(code, return_inverse=True)
        w_sum = np.bincount(inverse, weights=w)
        src_u = (uniq // nc).astype(np.int64)
        dst_u = (uniq % nc).astype(np.int64)
        indptr = np.zeros(nc + 1, dtype=np.int64)
        np.cumsum(np.bincount(src_u, minlength=nc), out=indptr[1:])
        return _Level(indptr, dst_u, w_sum, loop, level.m), dense
    indptr = np.zeros(nc + 1, dtype=np.int64)
    return _Level(indptr, np.zeros(0, dtype=np.int64), np.zeros(0), loop, level.m), dense


def louvain(
    g: Graph,
    seed: int = 0,
    max_levels: int = DEFAULT_MAX_LEVELS,
    max_community_size: int | None = None,
    _validate_moves: bool = False,
) -> PartitionResult:
    """Partition ``g`` by two-phase Louvain modularity optimization.

    Each level shuffles the sweep order with the seeded RNG, applies local
    moves until none improves (strict positive gain; ties toward the smallest
    community id), then aggregates communities into a weighted supergraph.
    Stops when a level yields zero moves or after ``max_levels`` levels.

    ``max_community_size`` recursively re-partitions any community larger
    than the budget, bounding the biggest subgraph a worker must train.

    A graph with no edges degenerates to one community per node with a
    warning (modularity reported as 0 by convention).
    """
    if g.num_edges == 0:
        logger.warning(
            "louvain on a graph with no edges: singleton communities, Q=0 by convention"
        )
        assignment = np.arange(g.node_count)
        return extract_subgraphs(g, assignment)

    rng = np.random.default_rng(seed)
    level = _Level.from_graph(g)
    assignment = np.arange(g.node_count)
    level_q: list[float] = []

    for _ in range(max_levels):
        order = rng.permutation(level.n)
        comm, moves = _local_moves(level, order, validate=_validate_moves)
        if moves == 0:
            break
        level, dense = _aggregate(level, comm)
        assignment = dense[assignment]
        level_q.append(modularity(g, _densify(assignment)))
        if level.n <= 1:
            break

    assignment = _densify(assignment)
    if max_community_size is not None:
        assignment = _split_oversized(g, assignment, seed, max_levels,
                                      max_community_size)
    result = extract_subgraphs(g, assignment)
    return PartitionResult(
        assignment=result.assignment,
        subgraphs=result.subgraphs,
        local_to_global=result.local_to_global,
        cross_edges=result.cross_edges,
        cross_node=result.cross_node,
        modularity=result.modularity,
        level_modularities=level_q,
    )


def _densify(assignment: np.ndarray) -> np.ndarray:
    """Relabel community ids densely in order of first appearance by node id."""
    _, first, inverse = np.unique(assignment, return_index=True, return_inverse=True)
    rank_by_first = np.argsort(np.argsort(first))
    return rank_by_first[inverse].astype(np.int64)


def _derive_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _split_oversized(g, assignment, seed, max_levels, budget):
    if budget < 1:
        raise ValueError("max_community_size must be >= 1")
    assignment = assignment.copy()
    next_id = int(assignment.max()) + 1
    pending = sorted(set(assignment.tolist()))
    while pending:
        c = pending.pop()
        members = np.flatnonzero(assignment == c)
        if len(members) <= budget:
            continue
        sub, _ = _induced_subgraph(g, members)
        if sub.num_edges == 0:
            pieces = np.arange(len(members)) // budget
        else:
            child_seed = _derive_seed(seed, c)
            pieces = louvain(sub, seed=child_seed, max_levels=max_levels).assignment
            if int(pieces.max()) == 0:
                # Louvain left one community: fall back to contiguous chunks
                pieces = np.arange(len(members)) // budget
        for p in range(1, int(pieces.max()) + 1):
            assignment[members[pieces == p]] = next_id
            pending.append(next_id)
            next_id += 1
        pending.append(c)  # piece 0 keeps label c; re-check its size
    return _densify(assignment)


def _induced_subgraph(g: Graph, members: np.ndarray) -> tuple[Graph, np.ndarray]:
    """Induced subgraph on ``members`` with local 0-based ids (sorted order)."""
    members = np.sort(members)
    inset = np.zeros(g.node_count, dtype=bool)
    inset[members] = True
    if g.num_edges:
        keep = inset[g.edges[:, 0]] & inset[g.edges[:, 1]]
        local = np.searchsorted(members, g.edges[keep])
    else:
        local = np.empty((0, 2), dtype=np.int64)
    return Graph.from_edges(len(members), local), members


def _require_assignment(g: Graph, assignment) -> np.ndarray:
    a = np.asarray(assignment, dtype=np.int64)
    if a.shape != (g.node_count,):
        raise ValueError("assignment must cover every node exactly once")
    if g.node_count and (a.min() < 0 or len(np.unique(a)) != a.max() + 1):
        raise ValueError("community ids must be dense integers 0..C-1")
    return a


def extract_subgraphs(g: Graph, assignment: CommunityAssignment) -> PartitionResult:
    """Build per-community induced subgraphs and cross-edge bookkeeping."""
    a = _require_assignment(g, assignment)
    ncomm = int(a.max()) + 1 if g.node_count else 0

    subgraphs: list[Graph] = []
    local_maps: list[np.ndarray] = []
    for c in range(ncomm):
        members = np.flatnonzero(a == c)
        sub, l2g = _induced_subgraph(g, members)
        subgraphs.append(sub)
        local_maps.append(l2g)

    if g.num_edges:
        cross_mask = a[g.edges[:, 0]] != a[g.edges[:, 1]]
        cross_edges = g.edges[cross_mask]
    else:
        cross_edges = np.empty((0, 2), dtype=np.int64)
    cross_node = np.zeros(g.node_count, dtype=bool)
    if cross_edges.size:
        cross_node[cross_edges[:, 0]] = True
        cross_node[cross_edges[:, 1]] = True

    try:
        q = modularity(g, a)
    except ValueError:
        logger.warning("modularity undefined (no edges); reporting 0 by convention")
        q = 0.0

    return PartitionResult(
        assignment=a,
        subgraphs=subgraphs,
        local_to_global=local_maps,
        cross_edges=cross_edges,
        cross_node=cross_node,
        modularity=q,
    )


def partition_report(pr: PartitionResult) -> str:
    """Human-readable text report: communities, cross edges, modularity."""
    lines = [
        f"communities: {pr.community_count}",
        f"modularity: {pr.modularity:.6f}",
        f"cross_edges: {len(pr.cross_edges)}",
    ]
    for c, l2g in enumerate(pr.local_to_global):
        lines.append(f"community {c} ({len(l2g)} nodes): "
                     + " ".join(str(v) for v in l2g))
    if len(pr.cross_edges):
        lines.append("cross edge list:")
        for u, v in pr.cross_edges:
            lines.append(f"  {u} {v}")
    return "\n".join(lines) + "\n"
