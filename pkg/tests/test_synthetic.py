import numpy as np

from elasticrec import dataset as D
from elasticrec import synthetic


def test_shape_and_determinism(tmp_path):
    a = synthetic.planted_interactions(num_users=300, num_items=120, seed=5)
    b = synthetic.planted_interactions(num_users=300, num_items=120, seed=5)
    assert np.array_equal(a.pairs, b.pairs)
    assert a.num_users == 300 and a.num_items == 120
    assert len({tuple(p) for p in a.pairs.tolist()}) == len(a.pairs)
    synthetic.write_tsv(a, tmp_path / "x.tsv")
    back = D.load_interactions(tmp_path / "x.tsv")
    assert len(back.pairs) == len(a.pairs)


def test_communities_dominate():
    raw = synthetic.planted_interactions(num_users=400, num_items=200, num_communities=4, seed=1)
    u, i = raw.pairs.T
    assert ((u % 4) == (i % 4)).mean() > 0.85


def test_default_survives_filtering():
    raw = D.filter_by_min_degree(synthetic.planted_interactions(seed=0), 10, 10)
    assert raw.num_users == 2000 and raw.num_items > 900
