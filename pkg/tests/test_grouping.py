import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elasticrec import grouping as Gr


def assert_partition(ga, n):
    allm = np.concatenate(ga.members)
    assert sorted(allm.tolist()) == list(range(n))
    assert ga.sizes.max() - ga.sizes.min() <= 1


def test_random_equal_groups():
    ga = Gr.group_random(100, 20, seed=1)
    assert (ga.sizes == 5).all()
    assert_partition(ga, 100)


def test_random_single_group():
    ga = Gr.group_random(37, 1, seed=0)
    assert ga.G == 1 and len(ga.members[0]) == 37


def test_random_uneven():
    ga = Gr.group_random(101, 20, seed=0)
    assert sorted(ga.sizes.tolist()) == [5] * 19 + [6]


def test_random_deterministic_and_validates():
    a, b = Gr.group_random(50, 7, 3), Gr.group_random(50, 7, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a.members, b.members))
    with pytest.raises(ValueError):
        Gr.group_random(5, 6, 0)


def test_popularity_example():
    ga = Gr.group_by_popularity(np.array([9, 5, 5, 1]), 2)
    assert [m.tolist() for m in ga.members] == [[0, 1], [2, 3]]


def test_popularity_ties_follow_ids():
    ga = Gr.group_by_popularity(np.full(9, 3), 3)
    assert [m.tolist() for m in ga.members] == [[0, 1, 2], [3, 4, 5], [6, 7, 8]]


def test_popularity_singletons():
    deg = np.array([2, 7, 1, 7, 4])
    ga = Gr.group_by_popularity(deg, 5)
    assert [int(m[0]) for m in ga.members] == [1, 3, 4, 0, 2]


@settings(max_examples=50, deadline=None)
@given(deg=st.lists(st.integers(1, 30), min_size=2, max_size=60), data=st.data())
def test_popularity_ordering(deg, data):
    deg = np.array(deg)
    G = data.draw(st.integers(1, len(deg)))
    ga = Gr.group_by_popularity(deg, G)
    assert_partition(ga, len(deg))
    for a, b in zip(ga.members, ga.members[1:]):
        assert deg[a].min() >= deg[b].max()


def test_pca_matches_brute_force():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(80, 6)) @ rng.normal(size=(6, 6))
    proj, comps, mean = Gr.pca(x, 2)
    assert np.allclose(comps @ comps.T, np.eye(2), atol=1e-10)
    xc = x - x.mean(0)
    # oracle: top-2 right singular vectors span the same subspace
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    assert np.allclose(np.abs(comps @ vt[:2].T), np.eye(2), atol=1e-8)
    err = ((xc - proj @ comps) ** 2).sum()
    for _ in range(200):
        q, _ = np.linalg.qr(rng.normal(size=(6, 2)))
        assert err <= ((xc - xc @ q @ q.T) ** 2).sum() + 1e-9
    # rank-2 projections spanned by coordinate pairs
    for i, j in itertools.combinations(range(6), 2):
        q = np.eye(6)[:, [i, j]]
        assert err <= ((xc - xc @ q @ q.T) ** 2).sum() + 1e-9


def blobs(seed=0, n=100):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 0.5, size=(n, 8)) + 5
    b = rng.normal(0, 0.5, size=(n, 8)) - 5
    return np.vstack([a, b]), np.repeat([0, 1], n)


@pytest.mark.parametrize("seed", range(5))
def test_clustering_separates_blobs(seed):
    x, truth = blobs(seed)
    ga = Gr.group_by_clustering(x, 2, seed=seed)
    assert_partition(ga, len(x))
    lab = ga.group_of
    purity = max((lab == truth).mean(), (lab != truth).mean())
    assert purity >= 0.95


def test_clustering_identical_points():
    ga = Gr.group_by_clustering(np.ones((23, 4)), 5, seed=0)
    assert_partition(ga, 23)


def test_clustering_single_group():
    x, _ = blobs()
    ga = Gr.group_by_clustering(x, 1)
    assert ga.G == 1 and len(ga.members[0]) == len(x)


def test_clustering_unbalanced_data_is_rebalanced():
    rng = np.random.default_rng(2)
    x = np.vstack([rng.normal(0, 0.1, (90, 3)), rng.normal(9, 0.1, (10, 3))])
    ga = Gr.group_by_clustering(x, 4, seed=0)
    assert_partition(ga, 100)
    assert (ga.sizes == 25).all()


def test_kmeans_reseeds_empty_cluster():
    x = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [10.0, 10.0]])
    cent, lab = Gr.kmeans(x, 3, seed=0)
    assert len(np.unique(lab)) == 3


def test_make_grouping_and_json(tmp_path):
    deg = np.arange(30)[::-1] + 1
    emb = np.random.default_rng(0).normal(size=(30, 4))
    for s in Gr.STRATEGIES:
        ga = Gr.make_grouping(s, 4, num_items=30, item_degree=deg, item_embeddings=emb, seed=1)
        assert ga.strategy == s
        assert_partition(ga, 30)
        ga.save(tmp_path / f"{s}.json")
        back = Gr.GroupAssignment.load(tmp_path / f"{s}.json")
        assert all(np.array_equal(a, b) for a, b in zip(ga.members, back.members))
    with pytest.raises(ValueError):
        Gr.make_grouping("nope", 4, num_items=30)
