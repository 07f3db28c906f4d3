"""Cross-subgraph conflict coordination (pipeline stage 3).

After the subgraph models converge independently, cross edges whose endpoints
are both selected are conflicts. A tabular Q-learning agent decides, per
conflict edge, which endpoint to push below the selection threshold; the
chosen endpoints are grouped per subgraph and handed to penalized fine-tuning
jobs. The global score improvement is the shared reward, and the best global
mask ever seen is kept.

The Q-table is keyed per conflict edge (two actions each: first or second
endpoint) rather than by a global state vector, which keeps the table linear
in the number of conflicts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import gcn
from .gcn import SubgraphModel
from .graph import Graph, SolutionMetrics, evaluate_solution
from .partition import PartitionResult

__all__ = [
    "GlobalMask",
    "ConflictSet",
    "CoordinationAgent",
    "CoordinatorConfig",
    "detect_conflicts",
    "base_action_linear_cover",
    "select_actions",
    "compute_reward",
    "update_q",
    "coordinate",
]

logger = logging.getLogger(__name__)

EdgeKey = tuple[int, int]
FIRST, SECOND = 0, 1


@dataclass
class GlobalMask:
    """Per-node selection probabilities over the full graph.

    ``chosen`` is derived (prob >= 0.5) so it can never drift out of sync
    with the probabilities. ``cross_node`` flags endpoints of cross edges.
    """

    prob: np.ndarray
    cross_node: np.ndarray

    @property
    def chosen(self) -> np.ndarray:
        return self.prob >= 0.5

    def copy(self) -> GlobalMask:
        return GlobalMask(self.prob.copy(), self.cross_node.copy())


@dataclass(frozen=True)
class ConflictSet:
    """Cross edges whose endpoints are both selected, canonical (i<j) order."""

    edges: tuple[EdgeKey, ...]

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class CoordinatorConfig:
    episodes: int = 50
    epsilon: float = 0.5
    epsilon_decay: float = 0.9
    epsilon_min: float = 0.05
    learning_rate: float = 0.1
    discount: float = 0.9
    penalty_coeff: float = 2.0
    finetune_budget: int = 300
    rebuild_restarts: int = 2
    no_improve_limit: int = 5
    conflict_penalty: float = 2.0
    seed: int = 0


@dataclass
class CoordinationAgent:
    """Tabular Q-learning state for conflict-edge endpoint choices."""

    epsilon: float
    epsilon_decay: float
    epsilon_min: float
    learning_rate: float
    discount: float
    q_table: dict[tuple[EdgeKey, int], float] = field(default_factory=dict)
    base_action: dict[EdgeKey, int] = field(default_factory=dict)
    best_mask: GlobalMask | None = None
    best_score: float = -np.inf
    episode: int = 0

    def q(self, edge: EdgeKey, choice: int) -> float:
        return self.q_table.get((edge, choice), 0.0)


def detect_conflicts(mask: GlobalMask, cross_edges: np.ndarray) -> ConflictSet:
    """Cross edges with both endpoints selected at the current mask."""
    edges = np.asarray(cross_edges, dtype=np.int64).reshape(-1, 2)
    if edges.size == 0:
        return ConflictSet(())
    chosen = mask.chosen
    both = chosen[edges[:, 0]] & chosen[edges[:, 1]]
    hit = np.sort(edges[both], axis=1)
    hit = hit[np.lexsort((hit[:, 1], hit[:, 0]))]
    return ConflictSet(tuple((int(u), int(v)) for u, v in hit))


def base_action_linear_cover(
    conflicts: ConflictSet, degree: np.ndarray
) -> dict[EdgeKey, int]:
    """One linear pass choosing a default fine-tune target per conflict edge.

    The endpoint incident to more conflict edges wins; ties go to the higher
    full-graph degree, then the higher node id.
    """
    conflict_degree: dict[int, int] = {}
    for i, j in conflicts.edges:
        conflict_degree[i] = conflict_degree.get(i, 0) + 1
        conflict_degree[j] = conflict_degree.get(j, 0) + 1

    actions: dict[EdgeKey, int] = {}
    for i, j in conflicts.edges:
        key_i = (conflict_degree[i], int(degree[i]), i)
        key_j = (conflict_degree[j], int(degree[j]), j)
        actions[(i, j)] = FIRST if key_i > key_j else SECOND
    return actions


def select_actions(
    agent: CoordinationAgent,
    conflicts: ConflictSet,
    rng: np.random.Generator,
) -> dict[EdgeKey, int]:
    """Epsilon-greedy endpoint choice per conflict edge.

    Explore: uniform endpoint. Exploit: higher Q-value, Q-ties falling back
    to the base linear-cover action. Unseen pairs default to Q = 0.
    """
    actions: dict[EdgeKey, int] = {}
    for edge in conflicts.edges:
        if rng.random() < agent.epsilon:
            actions[edge] = int(rng.integers(0, 2))
            continue
        q_first = agent.q(edge, FIRST)
        q_second = agent.q(edge, SECOND)
        if q_first > q_second:
            actions[edge] = FIRST
        elif q_second > q_first:
            actions[edge] = SECOND
        else:
            actions[edge] = agent.base_action.get(edge, SECOND)
    return actions


def compute_reward(prev: SolutionMetrics, new: SolutionMetrics) -> float:
    """Global score improvement (set size minus penalized conflicts)."""
    return new.score - prev.score


def update_q(
    agent: CoordinationAgent,
    taken: dict[EdgeKey, int],
    reward: float,
) -> CoordinationAgent:
    """One-step Q update for every action taken this episode, shared reward.

    Q <- Q + lr * (r + discount * max_choice Q(edge, .) - Q), then the
    exploration rate decays toward its floor.
    """
    for edge in sorted(taken):
        choice = taken[edge]
        best_next = max(agent.q(edge, FIRST), agent.q(edge, SECOND))
        q = agent.q(edge, choice)
        agent.q_table[(edge, choice)] = q + agent.learning_rate * (
            reward + agent.discount * best_next - q
        )
    agent.epsilon = max(agent.epsilon_min, agent.epsilon * agent.epsilon_decay)
    return agent


def _global_to_local(partition: PartitionResult) -> tuple[np.ndarray, np.ndarray]:
    n = len(partition.assignment)
    sub_of = partition.assignment
    local_of = np.zeros(n, dtype=np.int64)
    for l2g in partition.local_to_global:
        local_of[l2g] = np.arange(len(l2g))
    return sub_of, local_of


def _boundary_score(
    p: np.ndarray,
    sub: Graph,
    boundary: np.ndarray,
    conflict_penalty: float,
) -> float:
    """Score a candidate selection against the frozen external context.

    ``boundary`` rows are (local node, external endpoint currently chosen)
    for the subgraph's cross edges. The score mirrors the global one: local
    set size minus penalized internal and boundary conflicts.
    """
    sel = p >= 0.5
    intra = 0
    if sub.num_edges:
        intra = int(np.count_nonzero(sel[sub.edges[:, 0]] & sel[sub.edges[:, 1]]))
    ext = 0
    if len(boundary):
        ext = int(np.count_nonzero(sel[boundary[:, 0]] & boundary[:, 1].astype(bool)))
    return float(sel.sum()) - conflict_penalty * (intra + ext)


def fine_tune_job(args: tuple) -> tuple[int, np.ndarray, np.ndarray, int, bool]:
    """Run one penalized fine-tune on a detached weight copy.

    Two candidates are produced. The warm continuation runs the plain
    penalized fine-tune from the current weight, implementing the agent's
    drop decision with maximum continuity. A rebuild candidate descends
    from a fresh seeded initialization on the subgraph's frozen view of the
    global objective: its penalty list carries the episode targets plus one
    occurrence per chosen external partner of each boundary node (the
    cross-edge term of the global energy with the rest of the graph held
    fixed), so it reassembles the subgraph around the frozen context. Both
    are scored against that context; the coordinator merges warm results
    everywhere and promotes at most one rebuild per episode to keep
    parallel re-optimizations from re-randomizing each other.

    ``args`` is (subgraph_id, subgraph, embeddings, weight, hyperparams,
    penalty_locals, penalty_coeff, budget, boundary, conflict_penalty,
    restart_seed, rebuild_restarts). Returns a result tuple consumed by
    ``coordinate``; pure with respect to shared state so an aborted episode
    can be retried cleanly.
    """
    (sid, sub, embeddings, weight, hp, penalty_locals, coeff, budget,
     boundary, conflict_penalty, restart_seed, rebuild_restarts) = args
    model = SubgraphModel(
        subgraph_id=sid,
        seed=restart_seed,
        d_in=embeddings.shape[1],
        hp=hp,
        embeddings=embeddings,
        weight=weight.copy(),
        aggregated=gcn._aggregate_embeddings(sub, embeddings),
    )
    current_score = _boundary_score(gcn.forward(model, sub), sub, boundary,
                                    conflict_penalty)
    report = gcn.fine_tune(model, sub, penalty_locals, coeff, budget,
                           settle=True)
    epochs = report.epochs_run
    warm_score = _boundary_score(report.probabilities, sub, boundary,
                                 conflict_penalty)
    warm = (model.weight, report.probabilities, warm_score, report.diverged)
    if epochs == 0 or coeff <= 0:
        return sid, current_score, warm, None, epochs

    fresh_penalties = list(penalty_locals)
    if len(boundary):
        fresh_penalties += [int(l) for l, ext in boundary if ext]
    fresh_penalties = sorted(fresh_penalties)
    fresh = None
    for r in range(max(rebuild_restarts, 1)):
        r_seed = int(np.random.SeedSequence([restart_seed, r])
                     .generate_state(1)[0])
        candidate = gcn.init_model(sub, model.d_in, hp, r_seed,
                                   subgraph_id=sid)
        rep = gcn.fine_tune(candidate, sub, fresh_penalties, coeff, budget,
                            settle=True)
        epochs += rep.epochs_run
        if rep.diverged:
            continue
        score = _boundary_score(rep.probabilities, sub, boundary,
                                conflict_penalty)
        if fresh is None or score > fresh[2]:
            fresh = (candidate.weight, rep.probabilities, score, False)
    return sid, current_score, warm, fresh, epochs


def coordinate(
    g: Graph,
    partition: PartitionResult,
    models: dict[int, SubgraphModel],
    mask: GlobalMask,
    cfg: CoordinatorConfig,
    pool=None,
) -> tuple[GlobalMask, list[dict]]:
    """Run the episode loop: act, fine-tune, merge, reward, keep best.

    Per episode the agent picks one endpoint per current conflict edge; the
    endpoints are grouped by owning subgraph and fine-tuned in parallel (on
    weight copies, merged afterwards, so a failed episode retries cleanly).
    Returns the best-scoring mask ever observed plus one log record per
    episode: {episode, conflicts, set_size, score, reward, epsilon,
    best_score}.

    With zero initial conflicts the input mask is returned unchanged after
    zero episodes.
    """
    conflicts = detect_conflicts(mask, partition.cross_edges)
    metrics = evaluate_solution(g, mask.chosen, cfg.conflict_penalty)
    if len(conflicts) == 0:
        return mask, []

    agent = CoordinationAgent(
        epsilon=cfg.epsilon,
        epsilon_decay=cfg.epsilon_decay,
        epsilon_min=cfg.epsilon_min,
        learning_rate=cfg.learning_rate,
        discount=cfg.discount,
        base_action=base_action_linear_cover(conflicts, g.degree),
        best_mask=mask.copy(),
        best_score=metrics.score,
    )
    rng = np.random.default_rng(cfg.seed)
    sub_of, local_of = _global_to_local(partition)
    log: list[dict] = []
    no_improve = 0

    for episode in range(1, cfg.episodes + 1):
        if len(conflicts) == 0 and no_improve >= cfg.no_improve_limit:
            break
        # newly appearing conflict edges get a base action on first sighting
        missing = ConflictSet(tuple(
            e for e in conflicts.edges if e not in agent.base_action
        ))
        if len(missing):
            agent.base_action.update(
                base_action_linear_cover(missing, g.degree))

        actions = select_actions(agent, conflicts, rng)
        targets: dict[int, list[int]] = {}
        for (i, j), choice in actions.items():
            node = i if choice == FIRST else j
            targets.setdefault(int(sub_of[node]), []).append(int(local_of[node]))

        # planned drops count as unchosen in the frozen context, so parallel
        # re-optimizations can claim slots their partners are vacating
        dropped = np.zeros(len(sub_of), dtype=bool)
        for (i, j), choice in actions.items():
            dropped[i if choice == FIRST else j] = True
        boundaries = _boundaries(partition, mask, sub_of, local_of,
                                 set(targets), dropped)
        jobs = [
            (sid,
             partition.subgraphs[sid],
             models[sid].embeddings,
             models[sid].weight,
             models[sid].hp,
             sorted(set(locals_)),
             cfg.penalty_coeff,
             cfg.finetune_budget,
             boundaries[sid],
             cfg.conflict_penalty,
             int(np.random.SeedSequence([cfg.seed, episode, sid])
                 .generate_state(1)[0]),
             cfg.rebuild_restarts)
            for sid, locals_ in sorted(targets.items())
        ]
        results = _run_jobs(jobs, pool)

        # Each affected subgraph has three candidates scored against the
        # frozen context: keep the current state, the warm fine-tune, or the
        # fresh rebuild. Adopt the best, but serialize rebuild adoptions to
        # one per episode so parallel rebuilds cannot re-randomize each
        # other.
        promote = -1
        best_gain = 0.0
        for sid, current_score, warm, fresh, _epochs in sorted(results):
            if fresh is None:
                continue
            gain = fresh[2] - max(current_score, warm[2])
            if gain > best_gain:
                best_gain = gain
                promote = sid

        for sid, current_score, warm, fresh, _epochs in sorted(results):
            if sid == promote:
                new_w, probs, _score, diverged = fresh
            elif warm[2] > current_score:
                new_w, probs, _score, diverged = warm
            else:
                continue  # neither candidate improves on the current state
            if diverged:
                logger.warning(
                    "episode %d: subgraph %d fine-tune diverged; update skipped",
                    episode, sid,
                )
                continue
            models[sid].weight = new_w
            mask.prob[partition.local_to_global[sid]] = probs

        conflicts = detect_conflicts(mask, partition.cross_edges)
        new_metrics = evaluate_solution(g, mask.chosen, cfg.conflict_penalty)
        reward = compute_reward(metrics, new_metrics)
        update_q(agent, actions, reward)
        agent.episode = episode

        if new_metrics.score > agent.best_score:
            agent.best_score = new_metrics.score
            agent.best_mask = mask.copy()
            no_improve = 0
        else:
            no_improve += 1

        log.append({
            "episode": episode,
            "conflicts": len(conflicts),
            "set_size": new_metrics.set_size,
            "score": new_metrics.score,
            "reward": reward,
            "epsilon": agent.epsilon,
            "best_score": agent.best_score,
        })
        metrics = new_metrics

    return agent.best_mask, log


def _boundaries(
    partition: PartitionResult,
    mask: GlobalMask,
    sub_of: np.ndarray,
    local_of: np.ndarray,
    affected: set[int],
    dropped: np.ndarray,
) -> dict[int, np.ndarray]:
    """Per affected subgraph, (local node, external endpoint chosen) rows
    for its cross edges, frozen at the current mask minus planned drops."""
    rows: dict[int, list[tuple[int, int]]] = {sid: [] for sid in affected}
    chosen = mask.chosen & ~dropped
    for u, v in partition.cross_edges:
        su, sv = int(sub_of[u]), int(sub_of[v])
        if su in rows:
            rows[su].append((int(local_of[u]), int(chosen[v])))
        if sv in rows:
            rows[sv].append((int(local_of[v]), int(chosen[u])))
    return {
        sid: np.asarray(r, dtype=np.int64).reshape(-1, 2)
        for sid, r in rows.items()
    }


def _run_jobs(jobs: list[tuple], pool) -> list[tuple]:
    """Execute fine-tune jobs, retrying the batch once on worker failure."""
    if not jobs:
        return []
    for attempt in (1, 2):
        try:
            if pool is None:
                return [fine_tune_job(job) for job in jobs]
            return pool.map(fine_tune_job, jobs)
        except Exception:
            if attempt == 2:
                raise
            logger.warning("fine-tune worker failure; retrying episode once",
                           exc_info=True)
    raise AssertionError("unreachable")
