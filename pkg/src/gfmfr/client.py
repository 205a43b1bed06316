"""One simulated client: private user embedding, local copies of the shared
item table and predictor, BCE training with sampled negatives, KL
distillation against the group preference signal, and the clamp-then-Laplace
upload path.

Backbone surface: the round loop touches a client only through
``init_client_state``, ``local_train``, ``make_update`` and ``predict_all``.
An alternative backbone plugs in by providing the same four callables over
its own state type.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ProtocolError
from .numerics import AdamState, ParamSet, adam_step

BCE_CLIP = 1e-12
KL_CLIP = 1e-9
UPLOAD_CLAMP = 0.5  # elementwise sensitivity bound for the LDP path

UPDATE_SCHEMA_VERSION = 1
UPDATE_MAGIC = b"GCU1"


@dataclass
class PredictorParams:
    """Two-layer scoring head: sigmoid(w2 . relu(x W1 + b1) + b2)."""

    W1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h,)
    b2: float

    def copy(self) -> "PredictorParams":
        return PredictorParams(
            self.W1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2)
        )

    def flatten(self) -> np.ndarray:
        # fixed field order W1, b1, w2, b2: the clustering feature vector
        return np.concatenate(
            [self.W1.ravel(), self.b1, self.w2, np.array([self.b2])]
        )

    def to_paramset(self) -> ParamSet:
        return {
            "W1": self.W1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": np.array(self.b2),
        }

    @classmethod
    def from_paramset(cls, ps: ParamSet) -> "PredictorParams":
        return cls(W1=ps["W1"], b1=ps["b1"], w2=ps["w2"], b2=float(ps["b2"]))


@dataclass
class ClientState:
    user_id: int
    user_emb: np.ndarray  # (d,)  never leaves the client
    item_emb: np.ndarray  # (M, d) local copy of the shared table
    predictor: PredictorParams
    group_id: Optional[int]
    train_items: np.ndarray  # this user's positive item ids


@dataclass
class ClientUpdate:
    """Shared components uploaded to the server. Carries no user embedding."""

    user_id: int
    item_emb: np.ndarray
    predictor: PredictorParams
    sample_count: int


@dataclass
class LocalTrainStats:
    mean_rec_loss: float
    mean_dis_loss: float
    dis_measured: bool


def predictor_forward(pred: PredictorParams, x: np.ndarray) -> np.ndarray:
    """Apply the scoring head to a batch of d-vectors; returns probabilities."""
    z1 = x @ pred.W1 + pred.b1
    a = np.maximum(z1, 0.0)
    logits = a @ pred.w2 + pred.b2
    return 1.0 / (1.0 + np.exp(-logits))


def predict(state: ClientState, item: int) -> float:
    """Interaction probability for one item."""
    x = state.user_emb * state.item_emb[item]
    return float(predictor_forward(state.predictor, x[None, :])[0])


def predict_all(
    user_emb: np.ndarray, item_emb: np.ndarray, pred: PredictorParams
) -> np.ndarray:
    """Probabilities for the whole catalog at once."""
    return predictor_forward(pred, user_emb * item_emb)


def _forward(params: ParamSet, idx: np.ndarray):
    q = params["item_emb"][idx]
    x = params["user_emb"] * q
    z1 = x @ params["W1"] + params["b1"]
    a = np.maximum(z1, 0.0)
    logits = a @ params["w2"] + float(params["b2"])
    p = 1.0 / (1.0 + np.exp(-logits))
    return q, x, z1, a, logits, p


def _backward(params: ParamSet, idx, q, x, z1, a, dlogits) -> ParamSet:
    dw2 = a.T @ dlogits
    db2 = np.array(dlogits.sum())
    da = np.outer(dlogits, params["w2"])
    dz1 = da * (z1 > 0.0)
    dW1 = x.T @ dz1
    db1 = dz1.sum(axis=0)
    dx = dz1 @ params["W1"].T
    d_user = (dx * q).sum(axis=0)
    d_item = np.zeros_like(params["item_emb"])
    np.add.at(d_item, idx, dx * params["user_emb"])
    return {
        "user_emb": d_user,
        "item_emb": d_item,
        "W1": dW1,
        "b1": db1,
        "w2": dw2,
        "b2": db2,
    }


def _state_paramset(state: ClientState) -> ParamSet:
    return {
        "user_emb": state.user_emb,
        "item_emb": state.item_emb,
        **state.predictor.to_paramset(),
    }


def rec_loss(
    state: ClientState, positives: np.ndarray, negatives: np.ndarray
) -> tuple[float, ParamSet]:
    """Mean binary cross-entropy (positives labeled 1, negatives 0) with
    analytic gradients for the user embedding, item table, and predictor."""
    idx = np.concatenate([np.asarray(positives), np.asarray(negatives)]).astype(
        np.int64
    )
    if idx.size == 0:
        raise ValueError("empty batch")
    labels = np.concatenate(
        [np.ones(len(positives)), np.zeros(len(negatives))]
    )
    params = _state_paramset(state)
    q, x, z1, a, _, p = _forward(params, idx)
    p_c = np.clip(p, BCE_CLIP, 1.0 - BCE_CLIP)
    loss = float(-np.mean(labels * np.log(p_c) + (1.0 - labels) * np.log(1.0 - p_c)))
    dlogits = (p - labels) / idx.size
    return loss, _backward(params, idx, q, x, z1, a, dlogits)


def _dis_terms(p: np.ndarray, logits: np.ndarray, rows: np.ndarray, direction: str):
    """Per-item KL value and d(loss)/d(logit) for one direction.

    rows: (B, 2) teacher rows [p_interact, p_not]; both distributions are
    clamped to [KL_CLIP, 1 - KL_CLIP] before any log.
    """
    t1 = np.clip(rows[:, 0], KL_CLIP, 1.0 - KL_CLIP)
    t2 = np.clip(rows[:, 1], KL_CLIP, 1.0 - KL_CLIP)
    s1 = np.clip(p, KL_CLIP, 1.0 - KL_CLIP)
    s2 = np.clip(1.0 - p, KL_CLIP, 1.0 - KL_CLIP)
    if direction == "group-teacher":
        val = t1 * (np.log(t1) - np.log(s1)) + t2 * (np.log(t2) - np.log(s2))
        dlogit = -t1 * (1.0 - p) + t2 * p
    elif direction == "local-teacher":
        val = s1 * (np.log(s1) - np.log(t1)) + s2 * (np.log(s2) - np.log(t2))
        dlogit = p * (1.0 - p) * (logits - (np.log(t1) - np.log(t2)))
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    # inside the clamp region the loss is flat in p, so the gradient is zero
    active = (p > KL_CLIP) & (p < 1.0 - KL_CLIP)
    return val, dlogit * active


def dis_loss(
    state: ClientState,
    signal: np.ndarray,
    batch: np.ndarray,
    direction: str = "group-teacher",
) -> tuple[float, ParamSet]:
    """Mean KL divergence between the group preference rows and the local
    per-item prediction distribution [p, 1-p] over the batch items."""
    if state.group_id is None:
        raise ProtocolError(
            f"client {state.user_id} has no group assignment; distillation "
            "requires a prior clustering round"
        )
    idx = np.asarray(batch, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("empty batch")
    params = _state_paramset(state)
    q, x, z1, a, logits, p = _forward(params, idx)
    val, dlogit = _dis_terms(p, logits, signal[idx], direction)
    loss = float(np.mean(val))
    return loss, _backward(params, idx, q, x, z1, a, dlogit / idx.size)


def _sample_negatives_local(
    num_items: int, train_items: np.ndarray, n_neg: int, rng: np.random.Generator
) -> np.ndarray:
    candidates = np.setdiff1d(np.arange(num_items, dtype=np.int64), train_items)
    if candidates.size == 0:
        raise ValueError("user has interacted with every item")
    replace = candidates.size < n_neg
    return rng.choice(candidates, size=n_neg, replace=replace)


def local_train(
    state: ClientState,
    shared_item_emb: np.ndarray,
    shared_predictor: PredictorParams,
    signal: Optional[np.ndarray],
    epochs: int,
    lam: float,
    n_neg: int,
    lr: float,
    seed,
    kl_direction: str = "group-teacher",
    distill_scope: str = "sampled",
    distill_sample: int = 80,
) -> tuple[ClientState, LocalTrainStats]:
    """Resync from the shared parameters, then run Adam for the given number
    of epochs on BCE plus lam-weighted distillation.

    Each epoch uses all the client's positives with fresh uniform negatives
    (n_neg per positive). The distillation batch depends on the scope:
    "batch" reuses the training items, "catalog" covers every item, and
    "sampled" (the default) adds distill_sample uniform extra items to the
    training batch — wide enough to keep group structure alive, narrow
    enough not to drown the recommendation loss. The distillation value is
    measured whenever a signal is present so the round trace can report it,
    but its gradients only enter the update when lam > 0. With lam == 0 (or
    no signal) the parameter trajectory is bit-identical to backbone-only
    training.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    num_items = shared_item_emb.shape[0]
    params: ParamSet = {
        "user_emb": state.user_emb.copy(),
        "item_emb": shared_item_emb.copy(),
        **shared_predictor.copy().to_paramset(),
    }
    adam = AdamState.init(params)
    # separate streams: the distillation sample must not perturb the
    # negative-sampling draws, or a zero-coefficient run would diverge
    # bitwise from a backbone-only run
    train_ss, dis_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(train_ss)
    dis_rng = np.random.default_rng(dis_ss)
    positives = state.train_items

    rec_total = 0.0
    dis_total = 0.0
    for _ in range(epochs):
        negatives = _sample_negatives_local(
            num_items, positives, n_neg * len(positives), rng
        )
        work = ClientState(
            user_id=state.user_id,
            user_emb=params["user_emb"],
            item_emb=params["item_emb"],
            predictor=PredictorParams.from_paramset(params),
            group_id=state.group_id,
            train_items=positives,
        )
        loss_r, grads = rec_loss(work, positives, negatives)
        rec_total += loss_r
        if signal is not None:
            if distill_scope == "catalog":
                batch = np.arange(num_items, dtype=np.int64)
            elif distill_scope == "sampled":
                extra = dis_rng.choice(
                    num_items, size=min(distill_sample, num_items), replace=False
                )
                batch = np.concatenate([positives, negatives, extra])
            else:
                batch = np.concatenate([positives, negatives])
            loss_d, grads_d = dis_loss(work, signal, batch, kl_direction)
            dis_total += loss_d
            if lam > 0.0:
                for name in grads:
                    grads[name] = grads[name] + lam * grads_d[name]
        params, adam = adam_step(params, grads, adam, lr)

    new_state = ClientState(
        user_id=state.user_id,
        user_emb=params["user_emb"],
        item_emb=params["item_emb"],
        predictor=PredictorParams.from_paramset(params),
        group_id=state.group_id,
        train_items=positives,
    )
    stats = LocalTrainStats(
        mean_rec_loss=rec_total / epochs,
        mean_dis_loss=(dis_total / epochs) if signal is not None else 0.0,
        dis_measured=signal is not None,
    )
    return new_state, stats


def make_update(state: ClientState, delta: float, seed) -> ClientUpdate:
    """Build the upload: shared components only, optionally clamped to
    [-0.5, 0.5] and perturbed with Laplace(0, delta) noise per coordinate
    (privacy budget 1/delta under unit sensitivity)."""
    if delta < 0:
        raise ValueError(f"noise scale must be >= 0, got {delta}")
    if delta == 0:
        return ClientUpdate(
            user_id=state.user_id,
            item_emb=state.item_emb.copy(),
            predictor=state.predictor.copy(),
            sample_count=len(state.train_items),
        )
    rng = np.random.default_rng(seed)

    def noised(arr: np.ndarray) -> np.ndarray:
        clamped = np.clip(arr, -UPLOAD_CLAMP, UPLOAD_CLAMP)
        return clamped + rng.laplace(0.0, delta, size=arr.shape)

    pred = state.predictor
    noisy_pred = PredictorParams(
        W1=noised(pred.W1),
        b1=noised(pred.b1),
        w2=noised(pred.w2),
        b2=float(noised(np.array([pred.b2]))[0]),
    )
    return ClientUpdate(
        user_id=state.user_id,
        item_emb=noised(state.item_emb),
        predictor=noisy_pred,
        sample_count=len(state.train_items),
    )


def serialize_update(update: ClientUpdate) -> bytes:
    """Versioned wire encoding (float32). The schema has no field for the
    user embedding: that tensor structurally cannot leave the client."""
    m, d = update.item_emb.shape
    h = update.predictor.b1.shape[0]
    head = UPDATE_MAGIC + struct.pack(
        "<IIIIII", UPDATE_SCHEMA_VERSION, update.user_id, update.sample_count, m, d, h
    )
    body = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for arr in (
            update.item_emb,
            update.predictor.W1,
            update.predictor.b1,
            update.predictor.w2,
            np.array([update.predictor.b2]),
        )
    )
    return head + body


def init_client_state(
    user_id: int,
    train_items: np.ndarray,
    shared_item_emb: np.ndarray,
    shared_predictor: PredictorParams,
    user_emb: np.ndarray,
) -> ClientState:
    return ClientState(
        user_id=user_id,
        user_emb=user_emb,
        item_emb=shared_item_emb.copy(),
        predictor=shared_predictor.copy(),
        group_id=None,
        train_items=np.asarray(train_items, dtype=np.int64),
    )
