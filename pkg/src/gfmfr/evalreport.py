"""Full-catalog ranking metrics and the efficiency ledger (bytes stored,
bytes on the wire per round, training-time accounting)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .client import ClientState, predict_all
from .config import ExperimentConfig
from .dataio import SplitDataset

WIRE_BYTES = 4  # parameters and signals travel as float32


@dataclass
class MetricsRow:
    round: int
    hr_at_k: float
    ndcg_at_k: float
    evaluated_users: int


@dataclass
class EfficiencyLedger:
    client_storage_bytes: int
    per_round_upload_bytes: int  # per sampled client
    per_round_download_bytes: int  # per sampled client
    initial_broadcast_bytes: int
    signal_bytes: int
    # what transmitting raw modality features to every client would cost
    counterfactual_client_fusion_broadcast_bytes: int
    client_train_time_ns_median: int


def rank_from_scores(
    scores: np.ndarray, test_item: int, train_items: set[int] | frozenset[int]
) -> int:
    """1-based rank of the test item among all non-train items; ties are
    broken by item id ascending (lower id ranks first)."""
    candidates = np.ones(scores.shape[0], dtype=bool)
    for it in train_items:
        candidates[it] = False
    if not candidates[test_item]:
        raise ValueError("test item must not be a train item")
    s_t = scores[test_item]
    higher = int(np.sum(candidates & (scores > s_t)))
    tied_before = int(
        np.sum(candidates[:test_item] & (scores[:test_item] == s_t))
    )
    return 1 + higher + tied_before


def rank_of_test_item(
    state: ClientState, test_item: int, train_items: set[int]
) -> int:
    """Score the whole catalog with the client's model and rank the test item."""
    scores = predict_all(state.user_emb, state.item_emb, state.predictor)
    return rank_from_scores(scores, test_item, train_items)


def hr_at_k(rank: int, k: int) -> int:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1 if rank <= k else 0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(1+rank) inside the cutoff, else 0."""
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(1.0 + rank) if rank <= k else 0.0


def evaluate_all(
    clients: list[ClientState],
    split: SplitDataset,
    k: int,
    round_idx: int = 0,
    exclude_train_items: bool = True,
) -> MetricsRow:
    """Unweighted per-user mean of HR@k and NDCG@k, accumulated in user_id
    order for reproducibility."""
    hr_sum = 0.0
    ndcg_sum = 0.0
    n = 0
    for state in sorted(clients, key=lambda c: c.user_id):
        u = state.user_id
        train = set(int(i) for i in split.train.items_of(u)) if exclude_train_items else set()
        rank = rank_of_test_item(state, int(split.test_items[u]), train)
        hr_sum += hr_at_k(rank, k)
        ndcg_sum += ndcg_at_k(rank, k)
        n += 1
    return MetricsRow(
        round=round_idx, hr_at_k=hr_sum / n, ndcg_at_k=ndcg_sum / n, evaluated_users=n
    )


def account_efficiency(
    config: ExperimentConfig,
    num_items: int,
    modality_count: int,
    client_train_times_ns: list[int],
) -> EfficiencyLedger:
    """Byte accounting from declared wire sizes (float32 on the wire).

    Client storage covers the private user embedding, the local shared
    copies, and the 2-wide preference signal; it never includes a modality
    matrix, so it is independent of the modality count and width.
    """
    m, d, h = num_items, config.embed_dim, config.hidden_dim
    item_table = m * d
    predictor = d * h + h + h + 1
    signal = m * 2 if config.variant == "gfmfr" else 0
    times = sorted(client_train_times_ns)
    median_ns = times[len(times) // 2] if times else 0
    return EfficiencyLedger(
        client_storage_bytes=(d + item_table + predictor + signal) * WIRE_BYTES,
        per_round_upload_bytes=(item_table + predictor) * WIRE_BYTES,
        per_round_download_bytes=(item_table + predictor + signal) * WIRE_BYTES,
        initial_broadcast_bytes=(item_table + predictor) * WIRE_BYTES,
        signal_bytes=m * 2 * WIRE_BYTES,
        counterfactual_client_fusion_broadcast_bytes=(
            modality_count * m * config.modality_dim * WIRE_BYTES
        ),
        client_train_time_ns_median=median_ns,
    )
