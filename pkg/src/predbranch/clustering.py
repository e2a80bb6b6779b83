"""Agglomerative clustering of per-class probability rows into predicate groups."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .baseline import ClassStats
from .errors import FormatError, InvalidArgument

LINKAGES = ("average", "single", "complete")
METRICS = ("euclidean", "manhattan", "cosine")


@dataclass(frozen=True)
class GroupPartition:
    groups: tuple[tuple[int, ...], ...]
    linkage: str = "average"
    metric: str = "euclidean"

    def __post_init__(self):
        groups = tuple(tuple(sorted(int(c) for c in g)) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        members = [c for g in groups for c in g]
        if any(len(g) == 0 for g in groups):
            raise InvalidArgument("groups must be non-empty")
        if sorted(members) != list(range(len(members))):
            raise InvalidArgument("groups must be disjoint and cover 0..A-1 exactly")

    @property
    def A(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def group_of(self) -> np.ndarray:
        out = np.empty(self.A, dtype=np.int64)
        for b, g in enumerate(self.groups):
            out[list(g)] = b
        return out

    @property
    def global_to_local(self) -> np.ndarray:
        out = np.empty(self.A, dtype=np.int64)
        for g in self.groups:
            out[list(g)] = np.arange(len(g))
        return out

    def local_to_global(self, b: int) -> np.ndarray:
        return np.array(self.groups[b], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"groups": [list(g) for g in self.groups], "linkage": self.linkage, "metric": self.metric}

    @classmethod
    def from_dict(cls, d: dict) -> "GroupPartition":
        try:
            return cls(tuple(tuple(g) for g in d["groups"]), d.get("linkage", "average"), d.get("metric", "euclidean"))
        except (KeyError, TypeError, InvalidArgument) as exc:
            raise FormatError(f"bad partition: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def trivial(cls, A: int) -> "GroupPartition":
        return cls((tuple(range(A)),))


def pairwise_distances(X: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    diff = X[:, None, :] - X[None, :, :]
    if metric == "euclidean":
        return np.sqrt((diff ** 2).sum(-1))
    if metric == "manhattan":
        return np.abs(diff).sum(-1)
    if metric == "cosine":
        norms = np.linalg.norm(X, axis=1)
        norms[norms == 0] = 1.0
        sim = (X @ X.T) / np.outer(norms, norms)
        d = 1.0 - sim
        np.fill_diagonal(d, 0.0)
        return np.maximum(d, 0.0)
    raise InvalidArgument(f"unknown metric {metric!r}; expected one of {METRICS}")


def agglomerate(dist: np.ndarray, n_clusters: int, linkage: str = "average") -> list[list[int]]:
    """Merge clusters bottom-up until ``n_clusters`` remain.

    Clusters are keyed by their smallest member. Among equal linkage
    distances the pair with the lexicographically smallest key pair merges.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if linkage not in LINKAGES:
        raise InvalidArgument(f"unknown linkage {linkage!r}; expected one of {LINKAGES}")
    if not 1 <= n_clusters <= n:
        raise InvalidArgument(f"n_clusters must be in [1, {n}], got {n_clusters}")
    clusters: dict[int, list[int]] = {i: [i] for i in range(n)}
    while len(clusters) > n_clusters:
        keys = sorted(clusters)
        best = None
        for ai, a in enumerate(keys):
            for b in keys[ai + 1:]:
                block = dist[np.ix_(clusters[a], clusters[b])]
                if linkage == "average":
                    d = block.mean()
                elif linkage == "single":
                    d = block.min()
                else:
                    d = block.max()
                # strict < keeps the first (lexicographically smallest) pair on ties
                if best is None or d < best[0]:
                    best = (d, a, b)
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters.pop(b))
    return [clusters[k] for k in sorted(clusters)]


def cluster_predicates(stats: ClassStats, num_groups: int = 2, linkage: str = "average",
                       metric: str = "euclidean") -> GroupPartition:
    A = stats.avg_prob.shape[0]
    if num_groups > A:
        raise InvalidArgument(f"num_groups={num_groups} exceeds the number of classes A={A}")
    groups = agglomerate(pairwise_distances(stats.avg_prob, metric), num_groups, linkage)
    support = np.asarray(stats.support)
    head = int(np.argmax(support))  # first index among ties
    first = next(i for i, g in enumerate(groups) if head in g)
    ordered = [groups[first]] + [g for i, g in enumerate(groups) if i != first]
    return GroupPartition(tuple(tuple(g) for g in ordered), linkage, metric)


def adjusted_rand_index(a, b) -> float:
    """Adjusted Rand index between two labelings of the same items."""
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)

    def comb2(x):
        x = np.asarray(x, dtype=np.float64)
        return (x * (x - 1) / 2).sum()

    n = a.size
    sum_ij = comb2(table)
    sum_a = comb2(table.sum(1))
    sum_b = comb2(table.sum(0))
    total = n * (n - 1) / 2
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))
