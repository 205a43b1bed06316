"""The federated round loop: client sampling, local training, LDP upload,
weighted aggregation, clustering, fusion training, preference-signal
staging, coefficient schedules, ablation variants, and trace recording.

Signals are consumed with one round of staleness: a round's clients only
ever read signals staged at the end of the previous round, which keeps the
per-round data flow acyclic. Round 1 therefore runs with no signal and a
forced zero distillation coefficient.
"""
from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .client import ClientState, local_train, init_client_state, make_update, PredictorParams
from .config import ExperimentConfig
from .dataio import ModalityFeatures, SplitDataset
from .errors import ConfigError
from .evalreport import EfficiencyLedger, MetricsRow, account_efficiency, evaluate_all
from .numerics import xavier_init
from .server import (
    FusionParams,
    GroupState,
    SharedParams,
    aggregate,
    cluster_clients,
    fuse,
    group_item_embeddings,
    group_predictors,
    map_preference,
    train_aggregation_module,
)

# distinct stream tags so every RNG consumer gets an independent substream
_SEED_ITEM_EMB = 1
_SEED_PREDICTOR_W1 = 2
_SEED_PREDICTOR_W2 = 3
_SEED_GROUP_EMB = 5
_SEED_FUSION_PROJ = 6
_SEED_FUSION_ATTN = 7
_SEED_SAMPLING = 8
_SEED_TRAIN = 9
_SEED_LDP = 10
_SEED_CLUSTER = 11
_SEED_RANDOM_GROUP = 12


def derive_seed(*parts: int) -> int:
    """Deterministic 64-bit substream seed from integer parts."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0])


@dataclass
class RoundTrace:
    round: int
    sampled_ids: list[int]
    group_sizes: list[int]
    mean_rec_loss: float
    mean_dis_loss: float
    lambda_: float
    agg_loss_initial: float
    agg_loss_final: float
    churn: int
    dis_measured: bool
    client_train_ns: int


@dataclass
class FederationState:
    shared: SharedParams
    clients: list[ClientState]
    groups: GroupState
    features: ModalityFeatures
    lambda_history: list[float] = field(default_factory=list)
    traces: list[RoundTrace] = field(default_factory=list)
    round_idx: int = 0


@dataclass
class ExperimentResult:
    metrics: list[MetricsRow]
    traces: list[RoundTrace]
    group_rows: list[tuple[int, int, int]]  # (round, user_id, group_id)
    ledger: EfficiencyLedger
    state: FederationState


def sample_clients(num_clients: int, ratio: float, round_idx: int, seed: int) -> list[int]:
    """ceil(ratio * N) distinct ids, uniform without replacement, seeded by
    (seed, round)."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"sampling ratio must lie in (0, 1], got {ratio}")
    count = math.ceil(ratio * num_clients)
    rng = np.random.default_rng(derive_seed(seed, _SEED_SAMPLING, round_idx))
    return sorted(int(u) for u in rng.choice(num_clients, size=count, replace=False))


def lambda_schedule(
    strategy: str,
    round_idx: int,
    history: list[RoundTrace],
    lambda_base: float,
    total_rounds: int,
    smoothing: float = 0.9,
    warmup_frac: float = 0.2,
) -> float:
    """Distillation coefficient for the given round.

    scale-align matches the previous round's recommendation-loss scale (zero
    until a distillation measurement exists); smooth is an exponential
    approach to lambda_base; progressive ramps linearly over the warmup
    window; ours smooths the progressive target.
    """
    if round_idx < 1:
        raise ValueError("round index must be >= 1")
    prev_lambda = history[-1].lambda_ if history else 0.0
    warmup = max(1, math.ceil(warmup_frac * total_rounds))
    ramp = min(1.0, round_idx / warmup)
    if strategy == "scale-align":
        if not history or not history[-1].dis_measured or history[-1].mean_dis_loss <= 0.0:
            return 0.0
        return history[-1].mean_rec_loss / (history[-1].mean_dis_loss + 1e-8)
    if strategy == "smooth":
        return smoothing * prev_lambda + (1.0 - smoothing) * lambda_base
    if strategy == "progressive":
        return lambda_base * ramp
    if strategy == "ours":
        return smoothing * prev_lambda + (1.0 - smoothing) * (lambda_base * ramp)
    raise ConfigError(f"unknown schedule {strategy!r}")


def init_federation(
    config: ExperimentConfig, split: SplitDataset, features: ModalityFeatures
) -> FederationState:
    """Unified server-side initialization of shared parameters, per-client
    states, and the fusion module."""
    config.validate()
    store = split.train
    m, n = store.num_items, store.num_users
    if features.num_items != m:
        raise ConfigError(
            f"modality features cover {features.num_items} items, dataset has {m}"
        )
    if features.dim != config.modality_dim:
        raise ConfigError(
            f"modality_dim is {config.modality_dim} but features have width {features.dim}"
        )
    if config.top_k > m:
        raise ConfigError(f"top_k {config.top_k} exceeds catalog size {m}")

    d, h = config.embed_dim, config.hidden_dim
    seed = config.seed
    shared = SharedParams(
        item_emb=xavier_init(m, d, derive_seed(seed, _SEED_ITEM_EMB)),
        predictor=PredictorParams(
            W1=xavier_init(d, h, derive_seed(seed, _SEED_PREDICTOR_W1)),
            b1=np.zeros(h),
            w2=xavier_init(h, 1, derive_seed(seed, _SEED_PREDICTOR_W2)).ravel(),
            b2=0.0,
        ),
    )
    # user embeddings start at the elementwise-product identity: early
    # predictor drift then reflects item-side preference structure (what the
    # clustering step reads), and personalization grows away from it
    clients = [
        init_client_state(
            user_id=u,
            train_items=store.items_of(u),
            shared_item_emb=shared.item_emb,
            shared_predictor=shared.predictor,
            user_emb=np.ones(d),
        )
        for u in range(n)
    ]

    g, k = config.groups, features.k
    base_fusion = FusionParams(
        proj=[
            xavier_init(config.modality_dim, d, derive_seed(seed, _SEED_FUSION_PROJ, mm))
            for mm in range(k)
        ],
        attn=xavier_init(k, config.group_embed_dim, derive_seed(seed, _SEED_FUSION_ATTN)),
    )
    n_modules = g if config.grouping == "kmeans+multiple-agg" else 1
    groups = GroupState(
        assignments={},
        group_emb=xavier_init(g, config.group_embed_dim, derive_seed(seed, _SEED_GROUP_EMB)),
        fusion=[base_fusion.copy() for _ in range(n_modules)],
        pooled=[None] * g,
        group_preds=[None] * g,
        fused=[None] * g,
        signals=[None] * g,
        attention=[None] * g,
        agg_losses=[],
    )
    return FederationState(shared=shared, clients=clients, groups=groups, features=features)


def _train_one(state: FederationState, config: ExperimentConfig, lam: float, u: int):
    cs = state.clients[u]
    signal = None
    if config.variant == "gfmfr":
        gid = state.groups.assignments.get(u)
        if gid is not None and state.groups.signals[gid] is not None:
            signal = state.groups.signals[gid]
    new_cs, stats = local_train(
        cs,
        state.shared.item_emb,
        state.shared.predictor,
        signal,
        epochs=config.local_epochs,
        lam=lam,
        n_neg=config.n_neg,
        lr=config.client_lr,
        seed=derive_seed(config.seed, _SEED_TRAIN, state.round_idx + 1, u),
        kl_direction=config.kl_direction,
        distill_scope=config.distill_scope,
        distill_sample=config.distill_sample,
    )
    update = make_update(
        new_cs, config.ldp_delta, derive_seed(config.seed, _SEED_LDP, state.round_idx + 1, u)
    )
    return u, new_cs, stats, update


def run_round(
    state: FederationState,
    config: ExperimentConfig,
    executor: Optional[ThreadPoolExecutor] = None,
) -> RoundTrace:
    """One communication round. Mutates the federation state in place and
    returns the trace. Results are independent of the worker pool size:
    every client has its own seeded substream and reductions run in
    ascending user_id order."""
    t = state.round_idx + 1
    n = len(state.clients)
    sampled = sample_clients(n, config.sample_ratio, t, config.seed)
    lam = 0.0 if t == 1 else lambda_schedule(
        config.schedule, t, state.traces, config.lambda_base,
        config.rounds, config.smoothing, config.warmup_frac,
    )

    t0 = time.monotonic_ns()
    if executor is not None:
        results = list(executor.map(lambda u: _train_one(state, config, lam, u), sampled))
    else:
        results = [_train_one(state, config, lam, u) for u in sampled]
    train_ns = time.monotonic_ns() - t0

    results.sort(key=lambda r: r[0])
    updates = []
    rec_losses = []
    dis_losses = []
    dis_measured = False
    for u, new_cs, stats, update in results:
        state.clients[u] = new_cs
        updates.append(update)
        rec_losses.append(stats.mean_rec_loss)
        if stats.dis_measured:
            dis_losses.append(stats.mean_dis_loss)
            dis_measured = True

    state.shared = aggregate(updates)

    g = config.groups
    group_sizes = [0] * g
    churn = 0
    agg_initial = 0.0
    agg_final = 0.0
    if config.variant == "gfmfr":
        prev_assign = state.groups.assignments
        if config.grouping == "single":
            new_assign = {u: 0 for u in sampled}
        elif config.grouping == "random":
            rng = np.random.default_rng(derive_seed(config.seed, _SEED_RANDOM_GROUP, t))
            labels = rng.integers(0, g, size=len(sampled))
            new_assign = {u: int(l) for u, l in zip(sampled, labels)}
        else:
            result = cluster_clients(
                {up.user_id: up.predictor for up in updates},
                g,
                prev_assign if prev_assign else None,
                derive_seed(config.seed, _SEED_CLUSTER, t),
                n_init=config.kmeans_restarts,
            )
            new_assign = result.assignments
        churn = sum(
            1 for u in sampled if u in prev_assign and prev_assign[u] != new_assign[u]
        )
        merged = dict(prev_assign)
        merged.update(new_assign)
        for u, gid in new_assign.items():
            state.clients[u].group_id = gid
            group_sizes[gid] += 1

        pooled = group_item_embeddings(
            merged, updates, g, state.groups.pooled, state.shared.item_emb
        )
        gpreds = group_predictors(
            merged, updates, g, state.groups.group_preds, state.shared.predictor
        )

        mats = state.features.matrices
        if config.grouping == "kmeans+multiple-agg":
            initials = []
            finals = []
            group_emb = state.groups.group_emb
            for l in range(g):
                state.groups.fusion[l], group_emb, traj = train_aggregation_module(
                    state.groups.fusion[l], group_emb, mats, [pooled[l]],
                    config.fusion_steps, config.fusion_lr, group_ids=[l],
                )
                initials.append(traj[0])
                finals.append(traj[-1])
            state.groups.group_emb = group_emb
            agg_initial = float(np.mean(initials))
            agg_final = float(np.mean(finals))
        else:
            state.groups.fusion[0], state.groups.group_emb, traj = train_aggregation_module(
                state.groups.fusion[0], state.groups.group_emb, mats, pooled,
                config.fusion_steps, config.fusion_lr,
            )
            agg_initial = traj[0]
            agg_final = traj[-1]

        fused = []
        attention = []
        signals = []
        for l in range(g):
            module = state.groups.fusion[l if config.grouping == "kmeans+multiple-agg" else 0]
            q, weights = fuse(module, state.groups.group_emb, l, mats)
            fused.append(q)
            attention.append(weights)
            signals.append(map_preference(gpreds[l], q))

        state.groups.assignments = merged
        state.groups.pooled = pooled
        state.groups.group_preds = gpreds
        state.groups.fused = fused
        state.groups.attention = attention
        state.groups.signals = signals  # consumed from round t+1 onward
        state.groups.agg_losses.append(agg_final)

    trace = RoundTrace(
        round=t,
        sampled_ids=sampled,
        group_sizes=group_sizes,
        mean_rec_loss=float(np.mean(rec_losses)),
        mean_dis_loss=float(np.mean(dis_losses)) if dis_losses else 0.0,
        lambda_=lam,
        agg_loss_initial=agg_initial,
        agg_loss_final=agg_final,
        churn=churn,
        dis_measured=dis_measured,
        client_train_ns=train_ns,
    )
    state.round_idx = t
    state.lambda_history.append(lam)
    state.traces.append(trace)
    return trace


def _evaluation_states(state: FederationState) -> list[ClientState]:
    # every client evaluates with its private embedding plus the latest
    # globally aggregated shared parameters
    return [
        ClientState(
            user_id=cs.user_id,
            user_emb=cs.user_emb,
            item_emb=state.shared.item_emb,
            predictor=state.shared.predictor,
            group_id=cs.group_id,
            train_items=cs.train_items,
        )
        for cs in state.clients
    ]


def evaluate_federation(
    state: FederationState, split: SplitDataset, config: ExperimentConfig, round_idx: int
) -> MetricsRow:
    return evaluate_all(
        _evaluation_states(state),
        split,
        config.top_k,
        round_idx=round_idx,
        exclude_train_items=config.exclude_train_items,
    )


def run_experiment(
    config: ExperimentConfig, split: SplitDataset, features: ModalityFeatures
) -> ExperimentResult:
    """Initialize, run all rounds, evaluate on schedule, and account costs."""
    state = init_federation(config, split, features)
    metrics: list[MetricsRow] = []
    group_rows: list[tuple[int, int, int]] = []
    executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    try:
        for t in range(1, config.rounds + 1):
            run_round(state, config, executor)
            for u in sorted(state.groups.assignments):
                group_rows.append((t, u, state.groups.assignments[u]))
            if t % config.eval_every == 0 or t == config.rounds:
                metrics.append(evaluate_federation(state, split, config, t))
    finally:
        if executor is not None:
            executor.shutdown()
    ledger = account_efficiency(
        config,
        split.train.num_items,
        features.k,
        [tr.client_train_ns for tr in state.traces],
    )
    return ExperimentResult(
        metrics=metrics,
        traces=state.traces,
        group_rows=group_rows,
        ledger=ledger,
        state=state,
    )


# ---------------------------------------------------------------------------
# CSV outputs (column names are frozen)
# ---------------------------------------------------------------------------

def write_outputs(result: ExperimentResult, outdir: str | Path) -> None:
    """Write metrics.csv, trace.csv, groups.csv, and efficiency.csv."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    trace_by_round = {tr.round: tr for tr in result.traces}

    with open(outdir / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "hr_at_k", "ndcg_at_k", "evaluated_users",
                    "mean_rec_loss", "mean_dis_loss", "lambda"])
        for row in result.metrics:
            tr = trace_by_round[row.round]
            w.writerow([row.round, row.hr_at_k, row.ndcg_at_k, row.evaluated_users,
                        tr.mean_rec_loss, tr.mean_dis_loss, tr.lambda_])

    # wall-clock timing stays out of the CSVs so identical manifests yield
    # byte-identical outputs; it is reported via the in-memory ledger
    with open(outdir / "trace.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "sampled_ids", "group_sizes",
                    "mean_rec_loss", "mean_dis_loss", "lambda",
                    "agg_loss_initial", "agg_loss_final", "churn"])
        for tr in result.traces:
            w.writerow([
                tr.round, ";".join(map(str, tr.sampled_ids)),
                ";".join(map(str, tr.group_sizes)), tr.mean_rec_loss,
                tr.mean_dis_loss, tr.lambda_, tr.agg_loss_initial,
                tr.agg_loss_final, tr.churn,
            ])

    with open(outdir / "groups.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "user_id", "group_id"])
        for row in result.group_rows:
            w.writerow(list(row))

    with open(outdir / "efficiency.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        led = result.ledger
        w.writerow(["client_storage_bytes", "per_round_upload_bytes",
                    "per_round_download_bytes", "initial_broadcast_bytes",
                    "signal_bytes", "counterfactual_client_fusion_broadcast_bytes"])
        w.writerow([led.client_storage_bytes, led.per_round_upload_bytes,
                    led.per_round_download_bytes, led.initial_broadcast_bytes,
                    led.signal_bytes, led.counterfactual_client_fusion_broadcast_bytes])
