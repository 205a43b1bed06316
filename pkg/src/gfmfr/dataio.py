"""Interaction-log ingestion, modality feature files, leave-one-out splits,
negative sampling, and the planted-group synthetic generator.

File formats:
  * interactions: UTF-8 TSV ``user_id<TAB>item_id<TAB>timestamp``, no header
  * modality features: magic ``GMF1``, u32 version=1, u32 k, then per
    modality u32 M, u32 d1 and M*d1 little-endian float32, row-major
  * id-map sidecars: TSV ``external_id<TAB>dense_index`` written next to
    the ingested interactions file (one for users, one for items)
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError

MODALITY_MAGIC = b"GMF1"
MODALITY_VERSION = 1


@dataclass
class InteractionStore:
    """Per-user implicit-feedback lists, sorted by (timestamp, item_id)."""

    num_users: int
    num_items: int
    user_items: list[list[tuple[int, int]]]  # per user: [(item_id, timestamp), ...]

    def items_of(self, user: int) -> np.ndarray:
        return np.array([it for it, _ in self.user_items[user]], dtype=np.int64)

    def interaction_count(self, user: int) -> int:
        return len(self.user_items[user])


@dataclass
class ModalityFeatures:
    """Server-held initial per-item embeddings, one M x d1 matrix per modality."""

    matrices: list[np.ndarray]

    @property
    def k(self) -> int:
        return len(self.matrices)

    @property
    def num_items(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def dim(self) -> int:
        return self.matrices[0].shape[1]


@dataclass
class SplitDataset:
    """Leave-one-out split: train store plus one held-out item per user."""

    train: InteractionStore
    test_items: np.ndarray  # shape (num_users,)


@dataclass
class SyntheticSpec:
    num_users: int
    num_items: int
    modalities: int = 2
    feature_dim: int = 16
    true_group_count: int = 4
    interactions_per_user: int = 20
    noise_level: float = 0.3
    seed: int = 0
    latent_dim: int = field(init=False)

    def __post_init__(self):
        if self.true_group_count > self.num_users:
            raise ValueError("true_group_count must not exceed num_users")
        if self.interactions_per_user < 2:
            raise ValueError("interactions_per_user must be >= 2")
        if self.interactions_per_user > self.num_items:
            raise ValueError("interactions_per_user must not exceed num_items")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")
        if self.modalities < 1:
            raise ValueError("need at least one modality")
        self.latent_dim = min(8, self.feature_dim)


def _canonical_sort(records: list[tuple[int, int]]) -> list[tuple[int, int]]:
    # timestamp ascending, ties by item id ascending: the last entry is the
    # leave-one-out test item (latest, largest id on ties)
    return sorted(records, key=lambda r: (r[1], r[0]))


def load_interactions(path: str | Path) -> InteractionStore:
    """Parse a TSV interaction log into a compacted store.

    Duplicate (user, item) pairs keep the earliest timestamp; users left
    with fewer than two interactions are dropped; surviving user and item
    ids are compacted to dense 0-based indices (ascending external id) and
    the id maps are persisted as TSV sidecars next to the input file.
    """
    path = Path(path)
    earliest: dict[tuple[int, int], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                user, item, ts = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-integer field") from None
            if user < 0 or item < 0:
                raise DataError(f"{path}:{lineno}: negative id")
            key = (user, item)
            if key not in earliest or ts < earliest[key]:
                earliest[key] = ts

    by_user: dict[int, list[tuple[int, int]]] = {}
    for (user, item), ts in earliest.items():
        by_user.setdefault(user, []).append((item, ts))
    by_user = {u: recs for u, recs in by_user.items() if len(recs) >= 2}
    if not by_user:
        raise DataError(f"{path}: no user has >= 2 interactions after filtering")

    user_map = {ext: i for i, ext in enumerate(sorted(by_user))}
    item_ids = sorted({item for recs in by_user.values() for item, _ in recs})
    item_map = {ext: i for i, ext in enumerate(item_ids)}

    user_items: list[list[tuple[int, int]]] = [[] for _ in user_map]
    for ext_user, recs in by_user.items():
        dense = [(item_map[item], ts) for item, ts in recs]
        user_items[user_map[ext_user]] = _canonical_sort(dense)

    _write_idmap(path.with_name(path.name + ".user_idmap.tsv"), user_map)
    _write_idmap(path.with_name(path.name + ".item_idmap.tsv"), item_map)

    return InteractionStore(
        num_users=len(user_map), num_items=len(item_map), user_items=user_items
    )


def _write_idmap(path: Path, mapping: dict[int, int]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ext, dense in sorted(mapping.items()):
            fh.write(f"{ext}\t{dense}\n")


def write_modality_features(path: str | Path, features: ModalityFeatures) -> None:
    """Write the bit-exact binary feature file (float32 on disk)."""
    with open(path, "wb") as fh:
        fh.write(MODALITY_MAGIC)
        fh.write(struct.pack("<II", MODALITY_VERSION, features.k))
        for mat in features.matrices:
            rows, cols = mat.shape
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def load_modality_features(path: str | Path, expected_items: int) -> ModalityFeatures:
    """Read a feature file, validating shape and finiteness; widens to float64."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MODALITY_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:4]!r}, expected {MODALITY_MAGIC!r}")
    if len(raw) < 12:
        raise DataError(f"{path}: truncated header")
    version, k = struct.unpack_from("<II", raw, 4)
    if version != MODALITY_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if k < 1:
        raise DataError(f"{path}: modality count must be >= 1")
    offset = 12
    matrices = []
    for m in range(k):
        if offset + 8 > len(raw):
            raise DataError(f"{path}: truncated at modality {m} header")
        rows, cols = struct.unpack_from("<II", raw, offset)
        offset += 8
        if rows != expected_items:
            raise DataError(
                f"{path}: modality {m} has {rows} rows, expected {expected_items}"
            )
        nbytes = rows * cols * 4
        if offset + nbytes > len(raw):
            raise DataError(f"{path}: truncated at modality {m} payload")
        mat = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=offset)
        offset += nbytes
        mat = mat.astype(np.float64).reshape(rows, cols)
        if not np.all(np.isfinite(mat)):
            raise DataError(f"{path}: non-finite entry in modality {m}")
        matrices.append(mat)
    return ModalityFeatures(matrices=matrices)


def leave_one_out_split(store: InteractionStore) -> SplitDataset:
    """Hold out each user's latest interaction (largest item id on ties)."""
    test_items = np.empty(store.num_users, dtype=np.int64)
    train_lists: list[list[tuple[int, int]]] = []
    for u, recs in enumerate(store.user_items):
        if len(recs) < 2:
            raise DataError(f"user {u} has fewer than 2 interactions")
        ordered = _canonical_sort(recs)
        test_items[u] = ordered[-1][0]
        train_lists.append(ordered[:-1])
    train = InteractionStore(
        num_users=store.num_users, num_items=store.num_items, user_items=train_lists
    )
    return SplitDataset(train=train, test_items=test_items)


class NegativeSample(NamedTuple):
    items: np.ndarray
    with_replacement: bool


def sample_negatives(
    train: InteractionStore, user: int, n_neg: int, seed
) -> NegativeSample:
    """Sample items the user never interacted with, uniformly without
    replacement; falls back to replacement (flagged) when the candidate
    pool is too small."""
    if n_neg == 0:
        return NegativeSample(np.empty(0, dtype=np.int64), False)
    interacted = set(int(it) for it, _ in train.user_items[user])
    candidates = np.array(
        [i for i in range(train.num_items) if i not in interacted], dtype=np.int64
    )
    if candidates.size == 0:
        raise ValueError(f"user {user} has interacted with every item")
    rng = np.random.default_rng(seed)
    if candidates.size >= n_neg:
        return NegativeSample(rng.choice(candidates, size=n_neg, replace=False), False)
    return NegativeSample(rng.choice(candidates, size=n_neg, replace=True), True)


def generate_synthetic(
    spec: SyntheticSpec,
) -> tuple[InteractionStore, ModalityFeatures, np.ndarray]:
    """Planted-group dataset for desk-scale verification.

    Item latents Z are Gaussian; each true group carries a preference
    vector; a user's affinity is its group preference plus a user-specific
    perturbation scaled by noise_level. Each user interacts with a uniform
    sample of its top-affinity pool (the pool widens with noise_level and
    degenerates to the exact top set at noise 0), and every slot is
    replaced by a uniform random item with probability noise_level.
    Modality m is a random linear image of Z plus Gaussian noise scaled by
    noise_level, so the features stay informative about the latents by
    construction.
    """
    rng = np.random.default_rng(spec.seed)
    M, N, r = spec.num_items, spec.num_users, spec.latent_dim

    latents = rng.normal(size=(M, r))
    # polarized group directions: groups come in antipodal pairs along
    # orthonormal axes, so a global average of group preferences cancels
    # while group-conditioned pooling keeps full signal. Falls back to raw
    # gaussian directions when there are more groups than latent axes.
    g_true = spec.true_group_count
    n_axes = (g_true + 1) // 2
    raw = rng.normal(size=(max(n_axes, 1), r))
    if n_axes <= r:
        q, _ = np.linalg.qr(raw.T)
        axes = q.T[:n_axes]
        prefs = np.empty((g_true, r))
        for j in range(g_true):
            prefs[j] = (3.0 if j % 2 == 0 else -3.0) * axes[j // 2]
    else:
        prefs = rng.normal(size=(g_true, r))
    true_groups = np.arange(N, dtype=np.int64) % g_true

    user_items: list[list[tuple[int, int]]] = []
    n_inter = spec.interactions_per_user
    # users sample a slice of a wider group preference window, so group-level
    # pooling knows items an individual user never touched
    pool_size = min(M, n_inter + math.ceil(2.0 * spec.noise_level * n_inter))
    for u in range(N):
        perturb = rng.normal(size=r)
        affinity = prefs[true_groups[u]] + 0.25 * spec.noise_level * perturb
        scores = latents @ affinity
        order = np.argsort(-scores, kind="stable")
        pool = order[:pool_size]
        if pool_size == n_inter:
            chosen = list(pool)
        else:
            chosen = list(rng.choice(pool, size=n_inter, replace=False))
        chosen_set = set(int(i) for i in chosen)
        for slot in range(n_inter):
            if rng.random() < spec.noise_level:
                replacement = int(rng.integers(M))
                while replacement in chosen_set:
                    replacement = int(rng.integers(M))
                chosen_set.discard(int(chosen[slot]))
                chosen_set.add(replacement)
                chosen[slot] = replacement
        timestamps = rng.permutation(n_inter)
        recs = [(int(it), int(ts)) for it, ts in zip(chosen, timestamps)]
        user_items.append(_canonical_sort(recs))

    matrices = []
    for _ in range(spec.modalities):
        proj = rng.normal(size=(r, spec.feature_dim))
        noise = rng.normal(size=(M, spec.feature_dim))
        matrices.append(latents @ proj + spec.noise_level * noise)

    store = InteractionStore(num_users=N, num_items=M, user_items=user_items)
    return store, ModalityFeatures(matrices=matrices), true_groups
