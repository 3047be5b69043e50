"""Planted-community interaction generator used for the bundled demo data."""
from __future__ import annotations

import numpy as np

from .dataset import RawInteractions


def planted_interactions(num_users=2000, num_items=1000, num_communities=4,
                         min_degree=15, max_degree=40, in_community=0.9,
                         popularity_skew=0.8, seed=0) -> RawInteractions:
    """Sample a block-diagonal user/item preference structure.

    Users and items are split round-robin into ``num_communities`` blocks. Each
    user draws a degree uniformly in [min_degree, max_degree]; a fraction
    ``in_community`` of the picks comes from its own block, the rest from the
    whole catalogue. Within a block items are picked with Zipf weights
    ``rank ** -popularity_skew`` so that item popularity is uneven.
    """
    rng = np.random.default_rng(seed)
    user_comm = np.arange(num_users) % num_communities
    item_comm = np.arange(num_items) % num_communities
    weights = np.empty(num_items)
    for c in range(num_communities):
        members = np.flatnonzero(item_comm == c)
        ranks = rng.permutation(len(members)) + 1
        weights[members] = ranks.astype(float) ** -popularity_skew
    global_p = weights / weights.sum()
    block_p = []
    for c in range(num_communities):
        p = np.where(item_comm == c, weights, 0.0)
        block_p.append(p / p.sum())

    block_size = np.bincount(item_comm, minlength=num_communities)
    pairs = []
    for u in range(num_users):
        deg = min(int(rng.integers(min_degree, max_degree + 1)), num_items)
        n_in = min(int(rng.binomial(deg, in_community)), int(block_size[user_comm[u]]))
        inside = rng.choice(num_items, size=n_in, replace=False, p=block_p[user_comm[u]])
        outside = rng.choice(num_items, size=deg - n_in, replace=False, p=global_p)
        for i in np.unique(np.concatenate([inside, outside])):
            pairs.append((u, int(i)))
    pairs = np.asarray(pairs, dtype=np.int64)
    return RawInteractions(pairs, [f"u{u}" for u in range(num_users)],
                           [f"i{i}" for i in range(num_items)])


def write_tsv(raw: RawInteractions, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in raw.pairs:
            fh.write(f"{raw.user_tokens[u]}\t{raw.item_tokens[i]}\n")
