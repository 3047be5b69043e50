import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from elasticrec import dataset as D
from conftest import complete_bipartite, community_toy, write_rows


def test_load_maps_tokens_in_first_seen_order(tmp_path):
    p = write_rows(tmp_path / "a.tsv", [("alice", "book1"), ("alice", "book2"), ("bob", "book1")])
    raw = D.load_interactions(p)
    assert len(raw.pairs) == 3 and raw.num_users == 2 and raw.num_items == 2
    assert raw.user_tokens == ["alice", "bob"] and raw.item_tokens == ["book1", "book2"]
    assert raw.pairs.tolist() == [[0, 0], [0, 1], [1, 0]]


def test_load_collapses_duplicates(tmp_path):
    p = write_rows(tmp_path / "a.tsv", [("alice", "book1"), ("alice", "book1"), ("bob", "book2")])
    raw = D.load_interactions(p)
    assert len(raw.pairs) == 2
    assert sum(1 for u, i in raw.pairs if (u, i) == (0, 0)) == 1


def test_load_reports_malformed_line(tmp_path):
    rows = [(f"u{k}", f"i{k}") for k in range(10)]
    rows[6] = ("u6",)
    p = write_rows(tmp_path / "a.tsv", rows)
    with pytest.raises(D.ParseError) as exc:
        D.load_interactions(p)
    assert exc.value.line_no == 7
    assert "7" in str(exc.value)


def test_load_empty_file(tmp_path):
    p = tmp_path / "e.tsv"
    p.write_text("")
    with pytest.raises(D.EmptyDatasetError):
        D.load_interactions(p)


def test_load_csv_header_and_extra_columns(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("user,item,rating\nx,a,5\ny,a,3\nx,b,1\n")
    raw = D.load_interactions(p, fmt="csv", skip_header=True)
    assert raw.pairs.tolist() == [[0, 0], [1, 0], [0, 1]]


def test_filter_threshold_one_is_identity():
    raw = community_toy()
    out = D.filter_by_min_degree(raw, 1, 1)
    assert np.array_equal(out.pairs, raw.pairs)


def test_filter_star_graph_empties():
    raw = D.from_pairs([(0, i) for i in range(20)])
    with pytest.raises(D.EmptyDatasetError):
        D.filter_by_min_degree(raw, 10, 2)


def test_filter_complete_bipartite_identity():
    raw = complete_bipartite(12, 12)
    out = D.filter_by_min_degree(raw, 10, 10)
    assert len(out.pairs) == 144 and out.num_users == 12 and out.num_items == 12


def test_filter_cascades_to_fixpoint():
    # user 0 has 3 items, user 1 has 2; item 3 only seen by user 0
    raw = D.from_pairs([(0, 0), (0, 1), (0, 3), (1, 0), (1, 1), (2, 0), (2, 1)])
    out = D.filter_by_min_degree(raw, 2, 2)
    assert out.num_items == 2 and out.num_users == 3
    deg_u = np.bincount(out.pairs[:, 0])
    deg_i = np.bincount(out.pairs[:, 1])
    assert deg_u.min() >= 2 and deg_i.min() >= 2


def test_split_counts_per_user():
    raw = D.from_pairs([(0, i) for i in range(10)] + [(1, i) for i in range(10)])
    ds = D.split(raw, (0.7, 0.1, 0.2), seed=3)
    for u in (0, 1):
        assert (ds.train[:, 0] == u).sum() == 7
        assert (ds.val[:, 0] == u).sum() == 1
        assert (ds.test[:, 0] == u).sum() == 2


def test_split_all_train():
    raw = community_toy()
    ds = D.split(raw, (1.0, 0.0, 0.0), seed=0)
    assert len(ds.train) == len(raw.pairs) and len(ds.val) == 0 and len(ds.test) == 0


def test_split_small_user_keeps_train():
    raw = D.from_pairs([(0, 0), (1, 0), (1, 1), (1, 2), (2, 1), (2, 2)])
    ds = D.split(raw, seed=0)
    assert set(np.unique(ds.train[:, 0])) == {0, 1, 2}


def test_split_deterministic():
    raw = community_toy()
    a, b = D.split(raw, seed=11), D.split(raw, seed=11)
    for k in ("train", "val", "test"):
        assert np.array_equal(getattr(a, k), getattr(b, k))
    c = D.split(raw, seed=12)
    assert not np.array_equal(a.train, c.train)


def test_split_invariants(toy_dataset):
    ds = toy_dataset
    sets = [set(map(tuple, getattr(ds, k).tolist())) for k in ("train", "val", "test")]
    assert not (sets[0] & sets[1]) and not (sets[0] & sets[2]) and not (sets[1] & sets[2])
    assert ds.user_degree.sum() == ds.item_degree.sum() == len(ds.train)
    assert ds.user_degree.min() >= 1 and ds.item_degree.min() >= 1
    for u, items in ds.holdout("test").items():
        assert not set(items.tolist()) & set(ds.user_items[u].tolist())
    for i, users in enumerate(ds.item_users):
        assert all(i in set(ds.user_items[u].tolist()) for u in users)


def test_split_rejects_bad_ratios():
    with pytest.raises(D.DatasetError):
        D.split(community_toy(), (0.5, 0.1, 0.1))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 200), a=st.floats(0.05, 1.0), b=st.floats(0.0, 1.0))
def test_split_counts_rule(n, a, b):
    b = (1 - a) * b
    ratios = (a, b, 1 - a - b)
    tr, va, te = D._split_counts(n, ratios)
    assert tr + va + te == n and tr >= 1 and va >= 0 and te >= 0
    assert tr == max(1, min(n, int(np.ceil(a * n - 1e-9))))


def test_round_trip_and_byte_identical(tmp_path):
    p = tmp_path / "raw.tsv"
    raw = community_toy(seed=4)
    write_rows(p, [(raw.user_tokens[u], raw.item_tokens[i]) for u, i in raw.pairs])
    a = D.ingest(p, min_user_deg=2, min_item_deg=2, seed=5)
    b = D.ingest(p, min_user_deg=2, min_item_deg=2, seed=5)
    D.save_dataset(a, tmp_path / "a")
    D.save_dataset(b, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    back = D.load_dataset(tmp_path / "a")
    for k in ("train", "val", "test"):
        assert np.array_equal(getattr(a, k), getattr(back, k))
    assert back.item_tokens == a.item_tokens and back.manifest() == a.manifest()
