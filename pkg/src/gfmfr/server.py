"""Server-side protocol steps: sample-weighted aggregation of the shared
parameters, k-means clustering of clients by predictor parameters, group
pooling, training of the group-conditioned fusion module, and preference
signal generation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .client import ClientUpdate, PredictorParams, predictor_forward
from .errors import NumericError, ProtocolError
from .numerics import AdamState, adam_step

KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6


@dataclass
class SharedParams:
    """Globally aggregated item table and predictor."""

    item_emb: np.ndarray  # (M, d)
    predictor: PredictorParams


@dataclass
class FusionParams:
    """Per-modality projections plus the attention map conditioned on the
    group embedding."""

    proj: list[np.ndarray]  # k matrices, each (d1, d)
    attn: np.ndarray  # (k, d2)

    def copy(self) -> "FusionParams":
        return FusionParams([w.copy() for w in self.proj], self.attn.copy())


@dataclass
class GroupState:
    """Everything the server tracks about groups between rounds."""

    assignments: dict[int, int] = field(default_factory=dict)
    group_emb: Optional[np.ndarray] = None  # (g, d2)
    fusion: list[FusionParams] = field(default_factory=list)  # 1 shared or g copies
    pooled: list[Optional[np.ndarray]] = field(default_factory=list)  # C_l
    group_preds: list[Optional[PredictorParams]] = field(default_factory=list)
    fused: list[Optional[np.ndarray]] = field(default_factory=list)  # Q_l
    signals: list[Optional[np.ndarray]] = field(default_factory=list)  # (M, 2)
    attention: list[Optional[np.ndarray]] = field(default_factory=list)
    agg_losses: list[float] = field(default_factory=list)


def aggregate(updates: list[ClientUpdate]) -> SharedParams:
    """Coordinate-wise weighted mean with weights proportional to each
    client's sample count; reduction runs in ascending user_id order so the
    result does not depend on list order."""
    if not updates:
        raise ValueError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.user_id)
    ref = ordered[0]
    total = float(sum(u.sample_count for u in ordered))
    if total <= 0:
        raise ProtocolError("aggregate: total sample count is zero")

    item_acc = np.zeros_like(ref.item_emb)
    w1_acc = np.zeros_like(ref.predictor.W1)
    b1_acc = np.zeros_like(ref.predictor.b1)
    w2_acc = np.zeros_like(ref.predictor.w2)
    b2_acc = 0.0
    for u in ordered:
        if u.item_emb.shape != ref.item_emb.shape or u.predictor.W1.shape != ref.predictor.W1.shape:
            raise ProtocolError(f"aggregate: shape mismatch from client {u.user_id}")
        w = u.sample_count / total
        item_acc += w * u.item_emb
        w1_acc += w * u.predictor.W1
        b1_acc += w * u.predictor.b1
        w2_acc += w * u.predictor.w2
        b2_acc += w * u.predictor.b2
    return SharedParams(
        item_emb=item_acc,
        predictor=PredictorParams(W1=w1_acc, b1=b1_acc, w2=w2_acc, b2=b2_acc),
    )


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

@dataclass
class ClusterResult:
    assignments: dict[int, int]
    g_used: int
    reduced: bool
    sse_history: list[float]


def _kmeans_pp_init(x: np.ndarray, g: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((g, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, g):
        total = d2.sum()
        if total <= 0:
            centroids[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def _lloyd(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, float, list[float]]:
    g = centroids.shape[0]
    sse_history: list[float] = []
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        dists = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        # repair empty clusters by stealing the point farthest from its centroid
        for j in range(g):
            if np.any(labels == j):
                continue
            own_dist = dists[np.arange(len(labels)), labels]
            counts = np.bincount(labels, minlength=g)
            movable = counts[labels] > 1
            if not np.any(movable):
                break
            candidates = np.where(movable, own_dist, -np.inf)
            labels[int(np.argmax(candidates))] = j
        new_centroids = centroids.copy()
        for j in range(g):
            members = x[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        sse = float(np.sum((x - new_centroids[labels]) ** 2))
        sse_history.append(sse)
        movement = float(np.max(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1))))
        centroids = new_centroids
        if movement < KMEANS_TOL:
            break
    return labels, sse_history[-1], sse_history


def _align_labels(
    labels: dict[int, int], prev: dict[int, int], g: int
) -> dict[int, int]:
    """Permute new labels to maximize overlap with the previous assignment
    (greedy on the contingency table) so group identities persist."""
    common = [u for u in labels if u in prev]
    cont = np.zeros((g, g), dtype=np.int64)
    for u in common:
        if prev[u] < g:
            cont[labels[u], prev[u]] += 1
    mapping: dict[int, int] = {}
    used_old: set[int] = set()
    pairs = sorted(
        ((cont[i, j], i, j) for i in range(g) for j in range(g)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    for count, new_l, old_l in pairs:
        if new_l in mapping or old_l in used_old:
            continue
        mapping[new_l] = old_l
        used_old.add(old_l)
    free = [j for j in range(g) if j not in used_old]
    for i in range(g):
        if i not in mapping:
            mapping[i] = free.pop(0)
    return {u: mapping[l] for u, l in labels.items()}


def cluster_clients(
    predictors: dict[int, PredictorParams],
    g: int,
    prev: Optional[dict[int, int]],
    seed,
    n_init: int = 10,
) -> ClusterResult:
    """K-means (k-means++ seeding, best of n_init restarts) over flattened
    predictor parameters. When fewer clients than g are present, g is
    reduced for this call and flagged in the result."""
    if g < 1:
        raise ValueError("group count must be >= 1")
    ids = sorted(predictors)
    n = len(ids)
    g_used = min(g, n)
    reduced = g_used < g
    x = np.stack([predictors[u].flatten() for u in ids])

    if g_used == 1:
        labels_by_id = {u: 0 for u in ids}
        centroid = x.mean(axis=0)
        sse = float(np.sum((x - centroid) ** 2))
        return ClusterResult(labels_by_id, 1, reduced, [sse])

    rng = np.random.default_rng(seed)
    best_sse = np.inf
    best_labels = None
    best_history: list[float] = []
    for _ in range(n_init):
        centroids = _kmeans_pp_init(x, g_used, rng)
        labels, sse, history = _lloyd(x, centroids)
        if sse < best_sse:
            best_sse = sse
            best_labels = labels
            best_history = history
    assignments = {u: int(l) for u, l in zip(ids, best_labels)}
    if prev:
        assignments = _align_labels(assignments, prev, g)
    return ClusterResult(assignments, g_used, reduced, best_history)


# ---------------------------------------------------------------------------
# Group pooling
# ---------------------------------------------------------------------------

def _members_by_group(
    assignments: dict[int, int], updates: list[ClientUpdate], g: int
) -> list[list[ClientUpdate]]:
    members: list[list[ClientUpdate]] = [[] for _ in range(g)]
    for u in sorted(updates, key=lambda up: up.user_id):
        if u.user_id not in assignments:
            raise ProtocolError(f"client {u.user_id} has no group assignment")
        members[assignments[u.user_id]].append(u)
    return members


def group_item_embeddings(
    assignments: dict[int, int],
    updates: list[ClientUpdate],
    g: int,
    prev: Optional[list[Optional[np.ndarray]]],
    global_item_emb: np.ndarray,
) -> list[np.ndarray]:
    """Unweighted mean of member uploads per group; empty groups fall back
    to the previous round's pool, else the global table."""
    members = _members_by_group(assignments, updates, g)
    pooled: list[np.ndarray] = []
    for l in range(g):
        if members[l]:
            pooled.append(np.mean([u.item_emb for u in members[l]], axis=0))
        elif prev is not None and l < len(prev) and prev[l] is not None:
            pooled.append(prev[l])
        else:
            pooled.append(global_item_emb.copy())
    return pooled


def group_predictors(
    assignments: dict[int, int],
    updates: list[ClientUpdate],
    g: int,
    prev: Optional[list[Optional[PredictorParams]]],
    global_pred: PredictorParams,
) -> list[PredictorParams]:
    """Field-wise mean of member predictors, with the same fallbacks."""
    members = _members_by_group(assignments, updates, g)
    pooled: list[PredictorParams] = []
    for l in range(g):
        if members[l]:
            preds = [u.predictor for u in members[l]]
            pooled.append(
                PredictorParams(
                    W1=np.mean([p.W1 for p in preds], axis=0),
                    b1=np.mean([p.b1 for p in preds], axis=0),
                    w2=np.mean([p.w2 for p in preds], axis=0),
                    b2=float(np.mean([p.b2 for p in preds])),
                )
            )
        elif prev is not None and l < len(prev) and prev[l] is not None:
            pooled.append(prev[l])
        else:
            pooled.append(global_pred.copy())
    return pooled


# ---------------------------------------------------------------------------
# Group-conditioned fusion
# ---------------------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def fuse(
    fusion: FusionParams,
    group_emb: np.ndarray,
    group: int,
    modality_mats: list[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Attention-weighted sum of projected modality features for one group.

    Returns (Q, weights) where weights = softmax(attn @ group_emb[group]).
    """
    weights = _softmax(fusion.attn @ group_emb[group])
    q = np.zeros((modality_mats[0].shape[0], fusion.proj[0].shape[1]))
    for m, mat in enumerate(modality_mats):
        q += weights[m] * (mat @ fusion.proj[m])
    return q, weights


def train_aggregation_module(
    fusion: FusionParams,
    group_emb: np.ndarray,
    modality_mats: list[np.ndarray],
    targets: list[np.ndarray],
    steps: int,
    lr: float,
    group_ids: Optional[list[int]] = None,
) -> tuple[FusionParams, np.ndarray, list[float]]:
    """Adam on the mean (over groups) of MSE(fuse(l), target_l), with
    analytic gradients for the projections, attention map, and group
    embeddings. Deterministic: full-batch, no sampling. Returns the loss
    trajectory including the initial and final values."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if group_ids is None:
        group_ids = list(range(len(targets)))
    k = len(modality_mats)
    params = {
        **{f"proj{m}": fusion.proj[m].copy() for m in range(k)},
        "attn": fusion.attn.copy(),
        "group_emb": group_emb.copy(),
    }
    adam = AdamState.init(params)
    n_groups = len(group_ids)

    def loss_and_grads(ps):
        f = [modality_mats[m] @ ps[f"proj{m}"] for m in range(k)]
        cells = targets[0].size
        loss = 0.0
        grads = {name: np.zeros_like(p) for name, p in ps.items()}
        proj_acc = [np.zeros_like(f[0]) for _ in range(k)]  # sum_l a_lm * dQ_l
        for pos, l in enumerate(group_ids):
            e = ps["group_emb"][l]
            a = _softmax(ps["attn"] @ e)
            q = sum(a[m] * f[m] for m in range(k))
            diff = q - targets[pos]
            loss += float(np.mean(diff**2)) / n_groups
            dq = 2.0 * diff / (cells * n_groups)
            da = np.array([np.sum(dq * f[m]) for m in range(k)])
            dz = a * (da - np.dot(a, da))
            grads["attn"] += np.outer(dz, e)
            grads["group_emb"][l] += ps["attn"].T @ dz
            for m in range(k):
                proj_acc[m] += a[m] * dq
        for m in range(k):
            grads[f"proj{m}"] = modality_mats[m].T @ proj_acc[m]
        return loss, grads

    trajectory: list[float] = []
    for step in range(steps):
        loss, grads = loss_and_grads(params)
        if not np.isfinite(loss):
            raise NumericError(f"fusion training produced non-finite loss at step {step}")
        trajectory.append(loss)
        params, adam = adam_step(params, grads, adam, lr)
    final_loss, _ = loss_and_grads(params)
    if not np.isfinite(final_loss):
        raise NumericError(f"fusion training produced non-finite loss at step {steps}")
    trajectory.append(final_loss)

    new_fusion = FusionParams(
        proj=[params[f"proj{m}"] for m in range(k)], attn=params["attn"]
    )
    return new_fusion, params["group_emb"], trajectory


def map_preference(pred: PredictorParams, fused: np.ndarray) -> np.ndarray:
    """Apply a group predictor to fused item features; one [p, 1-p] row per
    item. Identical to a client prediction with an all-ones user embedding."""
    p = predictor_forward(pred, fused)
    return np.column_stack([p, 1.0 - p])
