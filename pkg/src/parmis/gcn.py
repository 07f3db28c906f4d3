"""Per-subgraph one-layer graph-convolution model (pipeline stage 1).

Each subgraph gets a tiny model: frozen Gumbel-softmax node embeddings, one
learnable weight column, closed-neighborhood mean aggregation, and a sigmoid
head producing per-node selection probabilities. Training is plain gradient
descent on the quadratic selection loss

    L = alpha * sum_{(i,j) in E} p_i p_j  -  beta * sum_i p_i
        + penalty_coeff * sum_{i in penalty_nodes} p_i

with hand-derived gradients (no autograd). Fine-tuning continues descent with
a penalty that pushes targeted nodes below the 0.5 selection threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Graph

__all__ = [
    "Hyperparams",
    "SubgraphModel",
    "TrainReport",
    "gumbel_softmax",
    "init_model",
    "forward",
    "loss",
    "gradient",
    "train",
    "fine_tune",
    "save_checkpoint",
    "load_checkpoint",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class Hyperparams:
    """Training knobs for one subgraph model.

    ``alpha``/``beta`` weigh the edge-conflict and set-size loss terms;
    ``alpha > beta`` makes any conflicting pair worse than dropping one
    endpoint. ``activation`` is applied to the aggregated feature before the
    sigmoid head ("identity" by default; "relu" available as a hook, though
    it clamps probabilities to >= 0.5 and is not useful for deselection).
    """

    alpha: float = 2.0
    beta: float = 1.0
    learning_rate: float = 0.01
    tolerance: float = 1e-5
    patience: int = 20
    max_epochs: int = 3000
    temperature: float = 1.0
    activation: str = "identity"
    hard_embeddings: bool = False
    optimizer: str = "adam"  # "gd" for plain descent
    # After training (and before each fine-tune) the weight is rescaled so
    # max |h| <= sharpness_cap. h is linear in the weight, so selections are
    # bit-identical under the rescale while sigmoid plasticity is restored:
    # fine-tuning can always move nodes back across the 0.5 threshold.
    # None disables the rescale.
    sharpness_cap: float | None = 4.0


@dataclass
class SubgraphModel:
    """Model state for one subgraph.

    ``embeddings`` (rows sum to 1) are frozen after initialization; only
    ``weight`` (shape (d_in, 1)) trains. ``aggregated`` caches the
    closed-neighborhood mean of the embeddings and is recomputed on load,
    never persisted.
    """

    subgraph_id: int
    seed: int
    d_in: int
    hp: Hyperparams
    embeddings: np.ndarray
    weight: np.ndarray
    aggregated: np.ndarray = field(repr=False, default=None)

    @property
    def node_count(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class TrainReport:
    final_loss: float
    epochs_run: int
    probabilities: np.ndarray
    converged: bool
    diverged: bool = False


def gumbel_softmax(
    logits: np.ndarray,
    temperature: float,
    noise: np.ndarray,
    hard: bool = False,
) -> np.ndarray:
    """Softmax of (logits + noise) / temperature along the last axis.

    ``noise`` must be standard-Gumbel samples of the same shape. Rows of the
    result are positive and sum to 1. With ``hard`` the result is the exact
    one-hot of the perturbed argmax.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if logits.shape != noise.shape:
        raise ValueError("logits and noise must have the same shape")
    z = (logits + noise) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    soft = e / e.sum(axis=-1, keepdims=True)
    if not hard:
        return soft
    out = np.zeros_like(soft)
    idx = soft.argmax(axis=-1)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def _aggregate_embeddings(sub: Graph, x: np.ndarray) -> np.ndarray:
    """Closed-neighborhood mean: (x_i + sum_{j in N(i)} x_j) / (deg_i + 1)."""
    neigh_sum = _neighbor_sums(sub, x)
    return (x + neigh_sum) / (sub.degree + 1.0)[:, None]


def _neighbor_sums(sub: Graph, values: np.ndarray) -> np.ndarray:
    """Per-node sum of ``values`` over neighbors; works for 1-D and 2-D."""
    n = sub.node_count
    out_shape = (n,) + values.shape[1:]
    if len(sub.indices) == 0:
        return np.zeros(out_shape)
    gathered = values[sub.indices]
    # zero-pad one row so every indptr start is a valid reduceat index;
    # empty segments are zeroed afterwards (reduceat returns x[start] there)
    pad = np.zeros((1,) + gathered.shape[1:])
    padded = np.concatenate([gathered, pad], axis=0)
    sums = np.add.reduceat(padded, sub.indptr[:-1], axis=0)
    empty = sub.degree == 0
    if empty.any():
        sums[empty] = 0.0
    return sums


def init_model(
    sub: Graph,
    d_in: int,
    hp: Hyperparams,
    seed: int,
    subgraph_id: int = 0,
) -> SubgraphModel:
    """Initialize a model for ``sub``: deterministic per seed.

    Per-node logits are i.i.d. standard normal, Gumbel noise is drawn once,
    and the embeddings are the row-wise Gumbel-softmax of the two — frozen
    from here on. The weight column starts uniform in
    [-1/sqrt(d_in), +1/sqrt(d_in)].
    """
    if d_in < 1:
        raise ValueError(f"d_in must be >= 1, got {d_in}")
    rng = np.random.default_rng(seed)
    n = sub.node_count
    logits = rng.standard_normal((n, d_in))
    noise = rng.gumbel(size=(n, d_in))
    embeddings = gumbel_softmax(logits, hp.temperature, noise,
                                hard=hp.hard_embeddings)
    bound = 1.0 / np.sqrt(d_in)
    weight = rng.uniform(-bound, bound, size=(d_in, 1))
    return SubgraphModel(
        subgraph_id=subgraph_id,
        seed=seed,
        d_in=d_in,
        hp=hp,
        embeddings=embeddings,
        weight=weight,
        aggregated=_aggregate_embeddings(sub, embeddings),
    )


class _Optimizer:
    """Step rule for the weight column: plain descent or Adam."""

    def __init__(self, hp: Hyperparams, shape: tuple):
        if hp.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {hp.optimizer!r}")
        self.hp = hp
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, weight: np.ndarray, grad: np.ndarray) -> np.ndarray:
        lr = self.hp.learning_rate
        if self.hp.optimizer == "gd":
            return weight - lr * grad
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return weight - lr * m_hat / (np.sqrt(v_hat) + eps)


def _normalize_sharpness(model: SubgraphModel) -> None:
    """Rescale the weight so max |h| <= sharpness_cap (signs unchanged)."""
    cap = model.hp.sharpness_cap
    if cap is None or model.node_count == 0:
        return
    peak = float(np.abs(model.aggregated @ model.weight).max())
    if peak > cap:
        model.weight = model.weight * (cap / peak)


def _check_sized(model: SubgraphModel, sub: Graph) -> None:
    if model.node_count != sub.node_count:
        raise ValueError(
            f"model sized for {model.node_count} nodes, subgraph has "
            f"{sub.node_count}"
        )


def forward(model: SubgraphModel, sub: Graph) -> np.ndarray:
    """Per-node selection probabilities sigmoid(activation(a_i . W)).

    Outputs are clamped into (0, 1) by 1e-7 so binarization and the loss
    stay well defined at float saturation.
    """
    _check_sized(model, sub)
    h = (model.aggregated @ model.weight).ravel()
    if model.hp.activation == "relu":
        h = np.maximum(h, 0.0)
    elif model.hp.activation != "identity":
        raise ValueError(f"unknown activation {model.hp.activation!r}")
    p = 0.5 * (1.0 + np.tanh(0.5 * h))
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def loss(
    p: np.ndarray,
    sub: Graph,
    alpha: float,
    beta: float,
    penalty_nodes: Sequence[int] = (),
    penalty_coeff: float = 0.0,
) -> float:
    """Quadratic selection loss, optionally with the fine-tuning penalty."""
    p = np.asarray(p, dtype=float)
    if p.shape != (sub.node_count,):
        raise ValueError("probability vector does not match subgraph size")
    edge_term = 0.0
    if sub.num_edges:
        edge_term = float(np.sum(p[sub.edges[:, 0]] * p[sub.edges[:, 1]]))
    value = alpha * edge_term - beta * float(p.sum())
    if len(penalty_nodes):
        # repeated occurrences accumulate, mirroring the gradient
        value += penalty_coeff * float(p[np.asarray(penalty_nodes)].sum())
    return value


def gradient(
    model: SubgraphModel,
    sub: Graph,
    penalty_nodes: Sequence[int] = (),
    penalty_coeff: float = 0.0,
) -> np.ndarray:
    """Closed-form dL/dW at the model's current weight.

    dL/dW = sum_i (dL/dp_i) * p_i (1 - p_i) * a_i with
    dL/dp_i = alpha * sum_{j in N(i)} p_j - beta + penalty_coeff * [i targeted].
    """
    _check_sized(model, sub)
    p = forward(model, sub)
    dldp = model.hp.alpha * _neighbor_sums(sub, p) - model.hp.beta
    if len(penalty_nodes):
        # penalty nodes may repeat; each occurrence contributes penalty_coeff
        np.add.at(dldp, np.asarray(penalty_nodes), penalty_coeff)
    chain = dldp * p * (1.0 - p)
    grad = model.aggregated.T @ chain[:, None]
    if not np.all(np.isfinite(grad)):
        raise ArithmeticError("non-finite gradient")
    return grad


def train_best(
    sub: Graph,
    d_in: int,
    hp: Hyperparams,
    seed: int,
    restarts: int = 1,
    subgraph_id: int = 0,
) -> tuple[SubgraphModel, TrainReport]:
    """Train ``restarts`` independently seeded models and keep the best loss.

    Restart seeds derive deterministically from ``seed``; ties go to the
    earliest restart. The quadratic selection landscape is riddled with
    local optima, so a few restarts materially improve the selected set.
    """
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    best: tuple[SubgraphModel, TrainReport] | None = None
    for r in range(restarts):
        r_seed = seed if restarts == 1 else int(
            np.random.SeedSequence([seed, r]).generate_state(1)[0])
        model = init_model(sub, d_in, hp, r_seed, subgraph_id=subgraph_id)
        report = train(model, sub)
        if best is None or report.final_loss < best[1].final_loss:
            best = (model, report)
    return best


def train(model: SubgraphModel, sub: Graph) -> TrainReport:
    """Gradient-descend the weight until the loss stabilizes.

    Convergence: |L_t - L_{t-1}| < tolerance for ``patience`` consecutive
    epochs, or ``max_epochs``. The best-loss snapshot seen (including the
    initial state) is kept; the model's weight is left at that snapshot and
    its probabilities are returned. A non-finite loss aborts with the last
    finite best snapshot and the ``diverged`` flag set.
    """
    hp = model.hp
    p = forward(model, sub)
    prev_loss = loss(p, sub, hp.alpha, hp.beta)
    best_loss, best_w, best_p = prev_loss, model.weight.copy(), p.copy()
    opt = _Optimizer(hp, model.weight.shape)
    epochs = 0
    streak = 0
    converged = False
    diverged = False

    for epoch in range(1, hp.max_epochs + 1):
        try:
            grad = gradient(model, sub)
        except ArithmeticError:
            logger.warning("subgraph %d: non-finite gradient at epoch %d",
                           model.subgraph_id, epoch)
            diverged = True
            break
        model.weight = opt.step(model.weight, grad)
        p = forward(model, sub)
        cur = loss(p, sub, hp.alpha, hp.beta)
        epochs = epoch
        if not np.isfinite(cur):
            logger.warning("subgraph %d: non-finite loss at epoch %d",
                           model.subgraph_id, epoch)
            diverged = True
            break
        if cur < best_loss:
            best_loss, best_w, best_p = cur, model.weight.copy(), p.copy()
        if abs(cur - prev_loss) < hp.tolerance:
            streak += 1
            if streak >= hp.patience:
                converged = True
                prev_loss = cur
                break
        else:
            streak = 0
        prev_loss = cur

    model.weight = best_w
    _normalize_sharpness(model)
    return TrainReport(final_loss=best_loss, epochs_run=epochs,
                       probabilities=forward(model, sub), converged=converged,
                       diverged=diverged)


def fine_tune(
    model: SubgraphModel,
    sub: Graph,
    penalty_nodes: Sequence[int],
    penalty_coeff: float,
    budget: int = 300,
    settle: bool = False,
) -> TrainReport:
    """Continue descent on the penalized loss from the current weight.

    Returns immediately (zero epochs) when every penalty node is already
    below 0.5. Otherwise descends until every penalty node sits below the
    threshold or the budget runs out. With ``settle`` the stop additionally
    waits for the penalized loss to stabilize, letting non-targeted nodes
    grow into the freed slots (used for rebuild-style calls); without it
    the call stops right at the threshold crossing, perturbing the rest of
    the subgraph as little as possible. No best-snapshot tracking: the
    weight ends where descent left it.
    """
    if not len(penalty_nodes):
        raise ValueError("penalty_nodes must be non-empty")
    hp = model.hp
    pen = np.asarray(penalty_nodes, dtype=np.int64)
    if len(pen) and (pen.min() < 0 or pen.max() >= sub.node_count):
        raise ValueError("penalty node id out of range")

    p = forward(model, sub)
    cur = loss(p, sub, hp.alpha, hp.beta, pen, penalty_coeff)
    if np.all(p[pen] < 0.5):
        return TrainReport(cur, 0, p, converged=True)

    _normalize_sharpness(model)  # restore plasticity; selections unchanged
    cur, epochs, diverged = _descend_penalized(model, sub, pen, penalty_coeff,
                                               budget, settle)
    p = forward(model, sub)
    return TrainReport(cur, epochs, p, converged=bool(np.all(p[pen] < 0.5)),
                       diverged=diverged)


def _descend_penalized(
    model: SubgraphModel,
    sub: Graph,
    pen: np.ndarray,
    penalty_coeff: float,
    budget: int,
    settle: bool = False,
) -> tuple[float, int, bool]:
    """In-place penalized descent; returns (final loss, epochs, diverged).

    Stops when every penalty node is below 0.5 (with ``settle``, only once
    the loss has also been stable for ``patience`` consecutive epochs), or
    at budget. On a non-finite step the last finite weight is restored.
    """
    hp = model.hp
    p = forward(model, sub)
    prev = loss(p, sub, hp.alpha, hp.beta, pen, penalty_coeff)
    opt = _Optimizer(hp, model.weight.shape)
    epochs = 0
    streak = 0
    cur = prev
    last_w = model.weight.copy()
    for epoch in range(1, budget + 1):
        try:
            grad = gradient(model, sub, pen, penalty_coeff)
        except ArithmeticError:
            logger.warning("subgraph %d: non-finite fine-tune gradient at epoch %d",
                           model.subgraph_id, epoch)
            model.weight = last_w
            return cur, epochs, True
        last_w = model.weight.copy()
        model.weight = opt.step(model.weight, grad)
        p = forward(model, sub)
        cur = loss(p, sub, hp.alpha, hp.beta, pen, penalty_coeff)
        epochs = epoch
        if not np.isfinite(cur):
            logger.warning("subgraph %d: non-finite fine-tune loss at epoch %d",
                           model.subgraph_id, epoch)
            model.weight = last_w
            p = forward(model, sub)
            cur = loss(p, sub, hp.alpha, hp.beta, pen, penalty_coeff)
            return cur, epochs, True
        streak = streak + 1 if abs(cur - prev) < hp.tolerance else 0
        prev = cur
        if np.all(p[pen] < 0.5) and (not settle or streak >= hp.patience):
            break
    return cur, epochs, False


def save_checkpoint(
    path: str | Path,
    model: SubgraphModel,
    dataset_id: str,
    best_loss: float,
    epochs_run: int,
) -> None:
    """Persist a model to ``path`` (numpy .npz container, any file name).

    The record is self-describing: a JSON metadata blob
    {format_version, dataset_id, subgraph_id, seed, hyperparams, d_in,
    best_loss, epochs_run} plus the exact float64 weight and embedding
    arrays. Round-trips are lossless.
    """
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "dataset_id": dataset_id,
        "subgraph_id": model.subgraph_id,
        "seed": model.seed,
        "hyperparams": asdict(model.hp),
        "d_in": model.d_in,
        "best_loss": best_loss,
        "epochs_run": epochs_run,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:  # file handle keeps the exact path (no .npz suffix)
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 weight=model.weight, embeddings=model.embeddings)


def load_checkpoint(path: str | Path, sub: Graph) -> tuple[SubgraphModel, dict]:
    """Load a checkpoint and rebuild the model against its subgraph.

    Returns (model, metadata). Raises ValueError on a corrupt or mismatched
    record.
    """
    path = Path(path)
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            weight = data["weight"]
            embeddings = data["embeddings"]
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(
            f"checkpoint {path}: unsupported format version "
            f"{meta.get('format_version')!r}"
        )
    if embeddings.shape[0] != sub.node_count:
        raise ValueError(
            f"checkpoint {path}: embeddings for {embeddings.shape[0]} nodes do "
            f"not match subgraph with {sub.node_count}"
        )
    hp = Hyperparams(**meta["hyperparams"])
    model = SubgraphModel(
        subgraph_id=meta["subgraph_id"],
        seed=meta["seed"],
        d_in=meta["d_in"],
        hp=hp,
        embeddings=embeddings,
        weight=weight,
        aggregated=_aggregate_embeddings(sub, embeddings),
    )
    return model, meta
