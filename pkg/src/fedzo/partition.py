"""Splitting a labeled dataset across clients: IID, Dirichlet and pathological."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class LabeledDataset:
    ids: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if ids.shape != labels.shape or ids.ndim != 1:
            raise ValueError("ids and labels must be 1-d arrays of equal length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if np.unique(ids).size != ids.size:
            raise ValueError("example ids must be unique")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_pairs(cls, items: Sequence[tuple[int, int]], num_classes: int) -> "LabeledDataset":
        ids = [i for i, _ in items]
        labels = [y for _, y in items]
        return cls(np.asarray(ids, dtype=np.int64), np.asarray(labels, dtype=np.int64), num_classes)

    def __len__(self) -> int:
        return self.ids.size

    def label_of(self) -> dict[int, int]:
        return dict(zip(self.ids.tolist(), self.labels.tolist()))


@dataclass(frozen=True)
class Partition:
    clients: list[list[int]]
    strategy: str
    params: dict = field(default_factory=dict)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clients]

    def to_json(self) -> dict:
        return {"clients": [list(map(int, c)) for c in self.clients]}


def _check_m(m: int) -> None:
    if m < 1:
        raise ValueError("number of clients must be >= 1")


def _warn_empty(n, m):
    if n < m:
        warnings.warn(f"{n} examples across {m} clients leaves some clients empty", stacklevel=3)


def split_iid(ds: LabeledDataset, m: int, rng: np.random.Generator) -> Partition:
    _check_m(m)
    _warn_empty(len(ds), m)
    perm = ds.ids[rng.permutation(len(ds))]
    chunks = np.array_split(perm, m)
    return Partition([c.tolist() for c in chunks], "iid")


def _largest_remainder(total: int, props: np.ndarray) -> np.ndarray:
    raw = total * props
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        # stable sort keeps lower client index first among equal remainders
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def _repair_empty(clients: list[list[int]]) -> None:
    for i in range(len(clients)):
        if clients[i]:
            continue
        sizes = [len(c) for c in clients]
        donor = int(np.argmax(sizes))
        if sizes[donor] <= 1:
            return
        clients[i].append(clients[donor].pop())


def split_dirichlet(ds: LabeledDataset, m: int, concentration: float, rng: np.random.Generator) -> Partition:
    """Per-class client shares drawn from ``Dirichlet(concentration * 1)``."""
    _check_m(m)
    if not concentration > 0:
        raise ValueError("concentration must be positive")
    _warn_empty(len(ds), m)
    clients: list[list[int]] = [[] for _ in range(m)]
    for c in range(ds.num_classes):
        members = ds.ids[ds.labels == c]
        if members.size == 0:
            continue
        members = members[rng.permutation(members.size)]
        props = rng.dirichlet(np.full(m, concentration))
        counts = _largest_remainder(members.size, props)
        start = 0
        for k in range(m):
            clients[k].extend(members[start : start + counts[k]].tolist())
            start += counts[k]
    _repair_empty(clients)
    return Partition(clients, "dirichlet", {"concentration": concentration})


def split_pathological(ds: LabeledDataset, m: int, classes_per_client: int, rng: np.random.Generator) -> Partition:
    """Label-sorted shards; client ``i`` receives ``classes_per_client`` consecutive shards.

    Shard ``s`` belongs to class ``order[s % C]`` for a random class order,
    so any ``classes_per_client <= C`` consecutive shards carry distinct
    labels. Classes left without a shard (``m * k < C``) are dealt
    round-robin so the split still covers every example.
    """
    _check_m(m)
    k = classes_per_client
    C = ds.num_classes
    if not 1 <= k <= C:
        raise ValueError(f"classes_per_client must lie in [1, {C}], got {k}")
    _warn_empty(len(ds), m)
    order = rng.permutation(C)
    n_shards = m * k
    shard_class = [int(order[s % C]) for s in range(n_shards)]
    clients: list[list[int]] = [[] for _ in range(m)]
    leftovers: list[int] = []
    for c in range(C):
        members = ds.ids[ds.labels == c]
        members = members[rng.permutation(members.size)]
        owners = [s for s in range(n_shards) if shard_class[s] == c]
        if not owners:
            leftovers.extend(members.tolist())
            continue
        for s, chunk in zip(owners, np.array_split(members, len(owners))):
            clients[s // k].extend(chunk.tolist())
    if leftovers:
        warnings.warn(
            f"{m} clients x {k} classes cannot hold all {C} classes; spreading the rest round-robin",
            stacklevel=2,
        )
        for i, ex in enumerate(leftovers):
            clients[i % m].append(ex)
    return Partition(clients, "pathological", {"classes_per_client": k})


def split(ds: LabeledDataset, m: int, strategy: str, rng: np.random.Generator, **params) -> Partition:
    if strategy == "iid":
        return split_iid(ds, m, rng)
    if strategy == "dirichlet":
        return split_dirichlet(ds, m, params.get("concentration", 0.3), rng)
    if strategy == "pathological":
        return split_pathological(ds, m, params.get("classes_per_client", 2), rng)
    raise ValueError(f"unknown partition strategy {strategy!r}")


def class_histograms(part: Partition, ds: LabeledDataset) -> np.ndarray:
    """``(m, num_classes)`` count matrix."""
    label = ds.label_of()
    hist = np.zeros((part.num_clients, ds.num_classes), dtype=np.int64)
    for i, ids in enumerate(part.clients):
        for ex in ids:
            hist[i, label[ex]] += 1
    return hist


def gini(values) -> float:
    """Gini coefficient of a nonnegative vector (0 = perfectly even)."""
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    total = x.sum()
    if n == 0 or total == 0:
        return 0.0
    cum = np.cumsum(x)
    return float((n + 1 - 2 * np.sum(cum) / total) / n)


def heterogeneity(part: Partition, ds: LabeledDataset) -> float:
    """Mean Gini coefficient of the clients' label histograms."""
    hist = class_histograms(part, ds)
    rows = [gini(h) for h in hist if h.sum() > 0]
    return float(np.mean(rows)) if rows else 0.0
