"""Classical baselines: min-degree greedy MIS and an exact branch-and-bound
oracle for small instances.

Both return plain boolean selection masks and are pure functions of the
input graph, so they are safe to run concurrently.
"""

from __future__ import annotations

import heapq

import numpy as np

from .graph import Graph, Selection

__all__ = ["greedy_mis", "exact_mis", "OracleSizeError", "EXACT_NODE_LIMIT"]

EXACT_NODE_LIMIT = 30


class OracleSizeError(ValueError):
    """exact_mis refused an instance larger than its node guard."""


def greedy_mis(g: Graph) -> Selection:
    """Greedy independent set: repeatedly take the minimum-degree node.

    Degrees are tracked on the residual graph after each removal; ties go to
    the lowest node id. The result is always a valid independent set.
    """
    n = g.node_count
    alive = np.ones(n, dtype=bool)
    deg = g.degree.astype(np.int64).copy()
    chosen = np.zeros(n, dtype=bool)

    heap = [(int(deg[v]), v) for v in range(n)]
    heapq.heapify(heap)
    while heap:
        d, v = heapq.heappop(heap)
        if not alive[v]:
            continue
        if d != deg[v]:  # stale: degree dropped since insertion
            heapq.heappush(heap, (int(deg[v]), v))
            continue
        chosen[v] = True
        alive[v] = False
        for u in g.neighbors(v):
            if not alive[u]:
                continue
            alive[u] = False
            for w in g.neighbors(u):
                if alive[w]:
                    deg[w] -= 1
    return chosen


def exact_mis(g: Graph) -> Selection:
    """Maximum independent set by branch and bound (guarded to small graphs).

    Bitmask-based search with a size bound, greedy inclusion of degree <= 1
    vertices, and branching on the highest-residual-degree vertex. Guarantees
    an optimal set for ``node_count <= EXACT_NODE_LIMIT``.

    Raises
    ------
    OracleSizeError
        If the graph exceeds the node guard.
    """
    n = g.node_count
    if n > EXACT_NODE_LIMIT:
        raise OracleSizeError(
            f"exact_mis limited to {EXACT_NODE_LIMIT} nodes, got {n}"
        )
    closed = []  # closed neighborhood mask per node
    adj = []
    for v in range(n):
        m = 0
        for u in g.neighbors(v):
            m |= 1 << int(u)
        adj.append(m)
        closed.append(m | (1 << v))

    best_size = 0
    best_mask = 0

    def dfs(cand: int, cur: int, size: int) -> None:
        nonlocal best_size, best_mask
        # greedy reductions: a candidate with residual degree <= 1 is always
        # safe to take
        while cand:
            picked = False
            m = cand
            while m:
                bit = m & -m
                v = bit.bit_length() - 1
                m ^= bit
                if (adj[v] & cand).bit_count() <= 1:
                    cand &= ~closed[v]
                    cur |= bit
                    size += 1
                    picked = True
                    break
            if not picked:
                break
        if size + cand.bit_count() <= best_size:
            return
        if cand == 0:
            if size > best_size:
                best_size = size
                best_mask = cur
            return
        # branch on the candidate with maximum residual degree (lowest id ties)
        pivot = -1
        pivot_deg = -1
        m = cand
        while m:
            bit = m & -m
            v = bit.bit_length() - 1
            m ^= bit
            d = (adj[v] & cand).bit_count()
            if d > pivot_deg:
                pivot_deg = d
                pivot = v
        bit = 1 << pivot
        dfs(cand & ~closed[pivot], cur | bit, size + 1)  # include pivot
        dfs(cand & ~bit, cur, size)  # exclude pivot

    dfs((1 << n) - 1 if n else 0, 0, 0)
    chosen = np.zeros(n, dtype=bool)
    for v in range(n):
        if best_mask >> v & 1:
            chosen[v] = True
    return chosen
