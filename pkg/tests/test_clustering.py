import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from predbranch.baseline import ClassStats
from predbranch.clustering import (GroupPartition, adjusted_rand_index, agglomerate, cluster_predicates,
                                   pairwise_distances)
from predbranch.errors import FormatError, InvalidArgument


def _stats(prob, support=None):
    A = prob.shape[0]
    support = np.arange(A, 0, -1) if support is None else support
    return ClassStats(prob, np.zeros((A, 2)), np.zeros((A, 2)), np.asarray(support), [])


def _as_sets(groups):
    return {frozenset(g) for g in groups}


def test_duplicate_centroids():
    prob = np.array([[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]])
    part = cluster_predicates(_stats(prob), 2)
    assert _as_sets(part.groups) == {frozenset({0, 1}), frozenset({2})}


def test_hand_distance_matrix():
    d = np.full((4, 4), 10.0)
    np.fill_diagonal(d, 0)
    d[0, 1] = d[1, 0] = 1.0
    d[2, 3] = d[3, 2] = 2.0
    d[0, 2] = d[2, 0] = 12.0
    assert _as_sets(agglomerate(d, 2, "average")) == {frozenset({0, 1}), frozenset({2, 3})}


def test_num_groups_equals_A():
    part = cluster_predicates(_stats(np.eye(4)), 4)
    assert sorted(part.groups) == [(0,), (1,), (2,), (3,)]


def test_too_many_groups():
    with pytest.raises(InvalidArgument):
        cluster_predicates(_stats(np.eye(3)), 4)


def test_tie_break_lexicographic():
    # all three pairs equidistant: (0, 1) merges first
    d = np.ones((3, 3)) - np.eye(3)
    assert _as_sets(agglomerate(d, 2, "average")) == {frozenset({0, 1}), frozenset({2})}


def test_group_zero_holds_most_frequent():
    prob = np.array([[1.0, 0, 0], [0.9, 0.1, 0], [0, 0, 1.0]])
    part = cluster_predicates(_stats(prob, [1, 1, 50]), 2)
    assert 2 in part.groups[0]


@pytest.mark.parametrize("method", ["average", "single", "complete"])
@pytest.mark.parametrize("seed", range(15))
def test_matches_scipy_linkage(method, seed):
    rng = np.random.default_rng(seed)
    A = int(rng.integers(3, 12))
    X = rng.normal(size=(A, 4))
    k = int(rng.integers(1, A + 1))
    ours = agglomerate(pairwise_distances(X), k, method)
    labels = fcluster(linkage(pdist(X), method), k, "maxclust")
    ref = {frozenset(np.flatnonzero(labels == c).tolist()) for c in np.unique(labels)}
    assert _as_sets(ours) == ref


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.permutations(list(range(7))))
def test_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    prob = rng.dirichlet(np.ones(7), size=7)
    support = rng.permutation(np.arange(1, 8))
    perm = np.array(perm)
    base = cluster_predicates(_stats(prob, support), 2)
    # class perm[i] of the permuted problem is class i of the original
    pprob = np.empty_like(prob)
    psup = np.empty_like(support)
    pprob[perm] = prob
    psup[perm] = support
    permuted = cluster_predicates(_stats(pprob, psup), 2)
    mapped = [tuple(sorted(int(perm[c]) for c in g)) for g in base.groups]
    assert [tuple(g) for g in permuted.groups] == mapped


def test_deterministic():
    prob = np.random.default_rng(0).dirichlet(np.ones(6), size=6)
    assert cluster_predicates(_stats(prob), 2) == cluster_predicates(_stats(prob), 2)


def test_partition_invariants():
    p = GroupPartition(((3, 1), (0, 2, 4)))
    assert p.groups == ((1, 3), (0, 2, 4))
    assert p.group_of.tolist() == [1, 0, 1, 0, 1]
    for b in range(2):
        glob = p.local_to_global(b)
        assert np.array_equal(p.global_to_local[glob], np.arange(len(glob)))
    with pytest.raises(InvalidArgument):
        GroupPartition(((0, 1), (1, 2)))
    with pytest.raises(InvalidArgument):
        GroupPartition(((0, 2),))
    with pytest.raises(InvalidArgument):
        GroupPartition(((0,), ()))


def test_partition_json():
    p = GroupPartition(((0, 2), (1,)))
    d = json.loads(p.to_json())
    assert d == {"groups": [[0, 2], [1]], "linkage": "average", "metric": "euclidean"}
    assert GroupPartition.from_dict(d) == p
    with pytest.raises(FormatError):
        GroupPartition.from_dict({"groups": [[0], [0]]})


def test_adjusted_rand_index():
    assert adjusted_rand_index([0, 0, 1, 1], [1, 1, 0, 0]) == pytest.approx(1.0)
    assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) < 0.0 + 1e-12


def test_distance_metrics():
    X = np.array([[1.0, 0.0], [0.0, 2.0]])
    assert pairwise_distances(X, "euclidean")[0, 1] == pytest.approx(np.sqrt(5))
    assert pairwise_distances(X, "manhattan")[0, 1] == pytest.approx(3.0)
    assert pairwise_distances(X, "cosine")[0, 1] == pytest.approx(1.0)
    with pytest.raises(InvalidArgument):
        pairwise_distances(X, "chebyshev")
