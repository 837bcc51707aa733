"""Interaction ingestion, leave-one-out splitting, popularity groups and batching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Per-user item sequences over a dense catalog ``[0, n_items)``."""

    sequences: list[np.ndarray]
    n_items: int
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return len(self.sequences)

    @property
    def pad_id(self) -> int:
        return self.n_items


@dataclass
class SplitDataset:
    """Leave-one-out roles.

    ``train[u]`` holds the training *sequence* ``seq[:-1]``: inputs are
    ``train[u][:-1]`` and per-position targets ``train[u][1:]``, so the last
    training target is the validation target. ``valid`` and ``test`` are
    ``(prefix, target)`` pairs.
    """

    train: list[np.ndarray]
    valid: list[tuple[np.ndarray, int]]
    test: list[tuple[np.ndarray, int]]
    n_items: int
    history: list[np.ndarray]

    @property
    def n_users(self) -> int:
        return len(self.train)

    @property
    def pad_id(self) -> int:
        return self.n_items


@dataclass
class PopularityPartition:
    counts: np.ndarray
    head: np.ndarray
    tail: np.ndarray
    buckets: list[np.ndarray]
    head_fraction: float = 0.2

    @property
    def is_head(self) -> np.ndarray:
        mask = np.zeros(len(self.counts), dtype=bool)
        mask[self.head] = True
        return mask

    def bucket_of(self) -> np.ndarray:
        """Bucket index (0 = least popular) per item."""
        out = np.empty(len(self.counts), dtype=np.int64)
        for b, items in enumerate(self.buckets):
            out[items] = b
        return out


@dataclass
class Batch:
    sequences: np.ndarray  # (B, T) item ids, pad = n_items
    pad_mask: np.ndarray  # (B, T) True where a real item sits
    targets: np.ndarray  # (B, T)
    negatives: np.ndarray  # (B, T, n_neg)
    last_valid_pos: np.ndarray  # (B,)
    users: np.ndarray  # (B,) user indices into the split


@dataclass
class SyntheticTruth:
    item_cluster: np.ndarray
    popularity: np.ndarray
    centroids: np.ndarray


def load_interactions(path, min_len: int = 3) -> Dataset:
    """Read ``user<TAB>item<TAB>timestamp`` lines into a dense-indexed Dataset.

    Sequences are ordered by timestamp with file order breaking ties. Users
    with fewer than ``min_len`` interactions are dropped before items are
    remapped, so the catalog only covers items that survive the filter.
    """
    rows: dict[str, list[tuple[int, int, str]]] = {}
    order = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            user, item, ts = parts
            try:
                stamp = int(ts)
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            rows.setdefault(user, []).append((stamp, order, item))
            order += 1

    kept = {u: sorted(r) for u, r in rows.items() if len(r) >= min_len}
    if not kept:
        raise DataError(f"{path}: no users with at least {min_len} interactions")

    # first appearance in file order among kept users
    first_seen: dict[str, int] = {}
    for user, r in kept.items():
        for _, pos, item in r:
            if item not in first_seen or pos < first_seen[item]:
                first_seen[item] = pos
    item_ids = sorted(first_seen, key=first_seen.__getitem__)
    item_index = {item: i for i, item in enumerate(item_ids)}

    user_ids = sorted(kept, key=lambda u: min(p for _, p, _ in kept[u]))
    sequences = [np.array([item_index[it] for _, _, it in kept[u]], dtype=np.int64) for u in user_ids]
    return Dataset(sequences=sequences, n_items=len(item_ids), user_ids=user_ids, item_ids=item_ids)


def write_interactions(ds: Dataset, path) -> None:
    """Write dense indices as TSV with the position as timestamp."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, seq in enumerate(ds.sequences):
            for t, item in enumerate(seq):
                fh.write(f"{u}\t{int(item)}\t{t}\n")


def write_remap(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, raw in enumerate(ds.item_ids):
            fh.write(f"{raw}\t{i}\n")


def leave_one_out_split(ds: Dataset) -> SplitDataset:
    train, valid, test = [], [], []
    for u, seq in enumerate(ds.sequences):
        if len(seq) < 3:
            raise DataError(f"user {u} has {len(seq)} interactions; leave-one-out needs at least 3")
        train.append(seq[:-1].copy())
        valid.append((seq[:-2].copy(), int(seq[-2])))
        test.append((seq[:-1].copy(), int(seq[-1])))
    history = [np.unique(s) for s in ds.sequences]
    return SplitDataset(train=train, valid=valid, test=test, n_items=ds.n_items, history=history)


def popularity_partition(
    split: SplitDataset, head_fraction: float = 0.2, n_buckets: int = 5
) -> PopularityPartition:
    """Head/tail and popularity buckets from training-sequence counts only."""
    if not 0.0 < head_fraction < 1.0:
        raise DataError(f"head_fraction must lie in (0, 1), got {head_fraction}")
    if n_buckets < 1:
        raise DataError("n_buckets must be positive")
    n = split.n_items
    counts = np.zeros(n, dtype=np.int64)
    for seq in split.train:
        np.add.at(counts, seq, 1)
    # most popular first; lower index wins ties (stable sort on -count)
    order = np.argsort(-counts, kind="stable")
    n_head = math.ceil(head_fraction * n)
    head = np.sort(order[:n_head])
    tail = np.sort(order[n_head:])
    ascending = order[::-1]
    buckets = [np.sort(b) for b in np.array_split(ascending, n_buckets)]
    return PopularityPartition(counts=counts, head=head, tail=tail, buckets=buckets, head_fraction=head_fraction)


def sample_negatives(targets: np.ndarray, n_items: int, n_neg: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform negatives over the catalog minus the aligned target."""
    draw = rng.integers(0, n_items - 1, size=targets.shape + (n_neg,))
    return draw + (draw >= targets[..., None])


def pad_left(seqs: list[np.ndarray], max_len: int, pad_id: int) -> np.ndarray:
    out = np.full((len(seqs), max_len), pad_id, dtype=np.int64)
    for b, s in enumerate(seqs):
        s = s[-max_len:]
        if len(s):
            out[b, max_len - len(s):] = s
    return out


def make_batches(
    split: SplitDataset,
    max_len: int,
    batch_size: int,
    n_neg: int,
    rng: np.random.Generator,
) -> Iterator[Batch]:
    """One epoch of shuffled, left-padded training batches."""
    if max_len < 2:
        raise DataError("max_len must be at least 2")
    if split.n_users == 0:
        return
    pad = split.pad_id
    order = rng.permutation(split.n_users)
    for start in range(0, len(order), batch_size):
        users = order[start:start + batch_size]
        inputs = pad_left([split.train[u][:-1] for u in users], max_len, pad)
        targets = pad_left([split.train[u][1:] for u in users], max_len, pad)
        mask = inputs != pad
        negatives = sample_negatives(np.where(mask, targets, 0), split.n_items, n_neg, rng)
        negatives[~mask] = pad
        yield Batch(
            sequences=inputs,
            pad_mask=mask,
            targets=targets,
            negatives=negatives,
            last_valid_pos=np.full(len(users), max_len - 1, dtype=np.int64),
            users=users,
        )


def synthesize_dataset(
    n_users: int = 2000,
    n_items: int = 1000,
    zipf_s: float = 1.2,
    n_clusters: int = 20,
    avg_len: float = 12.0,
    d_sem: int = 64,
    rng: Optional[np.random.Generator] = None,
    noise: float = 0.1,
    p_stay: float = 0.8,
) -> tuple[Dataset, np.ndarray, SyntheticTruth]:
    """Clustered long-tail corpus with matching semantic vectors.

    Items belong to latent clusters; a semantic vector is its cluster centroid
    plus isotropic noise. Popularity follows a Zipf law over a random item
    ranking. Each user walks clusters (staying with probability ``p_stay``)
    and picks items inside the current cluster proportionally to popularity.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if min(n_users, n_items, n_clusters, d_sem) < 1:
        raise DataError("sizes must be positive")
    if n_clusters > n_items:
        raise DataError(f"n_clusters={n_clusters} exceeds n_items={n_items}")
    if avg_len < 3:
        raise DataError("avg_len must be at least 3")
    if zipf_s < 0 or noise < 0 or not 0.0 <= p_stay <= 1.0:
        raise DataError("invalid zipf_s / noise / p_stay")

    cluster = np.concatenate([np.arange(n_clusters), rng.integers(0, n_clusters, n_items - n_clusters)])
    cluster = cluster[rng.permutation(n_items)]
    ranks = rng.permutation(n_items) + 1
    popularity = 1.0 / ranks.astype(np.float64) ** zipf_s
    popularity /= popularity.sum()

    centroids = rng.normal(size=(n_clusters, d_sem))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    semantic = centroids[cluster] + noise * rng.normal(size=(n_items, d_sem)) / math.sqrt(d_sem)

    members = [np.flatnonzero(cluster == c) for c in range(n_clusters)]
    within = [popularity[m] / popularity[m].sum() for m in members]
    mass = np.array([popularity[m].sum() for m in members])

    lengths = 3 + rng.poisson(avg_len - 3, size=n_users)
    sequences = []
    for n in lengths:
        c = rng.choice(n_clusters, p=mass)
        seq = np.empty(n, dtype=np.int64)
        for t in range(n):
            if t and n_clusters > 1 and rng.random() >= p_stay:
                w = mass.copy()
                w[c] = 0.0
                c = rng.choice(n_clusters, p=w / w.sum())
            seq[t] = members[c][rng.choice(len(members[c]), p=within[c])]
        sequences.append(seq)

    ds = Dataset(
        sequences=sequences,
        n_items=n_items,
        user_ids=[str(u) for u in range(n_users)],
        item_ids=[str(i) for i in range(n_items)],
    )
    truth = SyntheticTruth(item_cluster=cluster, popularity=popularity, centroids=centroids)
    return ds, semantic.astype(np.float32), truth


def write_clusters(truth: SyntheticTruth, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, c in enumerate(truth.item_cluster):
            fh.write(f"{i}\t{int(c)}\n")


def save_split(split: SplitDataset, path) -> None:
    """Compact npz snapshot of a split (sequences as ragged offsets)."""
    seqs = [np.append(tr, te[1]) for tr, te in zip(split.train, split.test)]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    flat = np.concatenate(seqs) if seqs else np.zeros(0, dtype=np.int64)
    np.savez(Path(path), flat=flat, lengths=lengths, n_items=np.int64(split.n_items))


def load_split(path) -> SplitDataset:
    z = np.load(Path(path))
    offsets = np.concatenate([[0], np.cumsum(z["lengths"])])
    seqs = [z["flat"][a:b] for a, b in zip(offsets[:-1], offsets[1:])]
    return leave_one_out_split(Dataset(sequences=seqs, n_items=int(z["n_items"])))
