"""Dimension-independent user/item scoring, top-K ranking and ranking metrics.

A user vector u (length D = N*d) is scored against a single item block e (length
d) by tiling e N times; that dot product equals ``segment_sum(u) @ e`` where
``segment_sum`` adds the N length-d segments of u. Everything below uses the
segment-sum form.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class ElasticConfig:
    """Per-group sets of selected block indices."""

    block_sets: tuple[tuple[int, ...], ...]
    N: int

    def __post_init__(self):
        sets = tuple(tuple(int(n) for n in b) for b in self.block_sets)
        object.__setattr__(self, "block_sets", sets)
        for g, b in enumerate(sets):
            if not b:
                raise ValueError(f"group {g} has no blocks")
            if list(b) != sorted(set(b)):
                raise ValueError(f"group {g} block indices must be sorted and distinct: {b}")
            if b[0] < 0 or b[-1] >= self.N:
                raise ValueError(f"group {g} block index out of range [0, {self.N}): {b}")

    @classmethod
    def from_sets(cls, block_sets, N):
        return cls(tuple(tuple(sorted(set(int(n) for n in b))) for b in block_sets), N)

    @classmethod
    def full(cls, G, N):
        return cls(tuple(tuple(range(N)) for _ in range(G)), N)

    @property
    def G(self) -> int:
        return len(self.block_sets)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.block_sets], dtype=np.int64)

    @property
    def max_blocks(self) -> int:
        return int(self.sizes.max())

    @property
    def total_blocks(self) -> int:
        return int(self.sizes.sum())

    def scales(self) -> np.ndarray:
        """Per-group normalisation max_g'|B_g'| / |B_g|."""
        return self.max_blocks / self.sizes

    def mask(self) -> np.ndarray:
        m = np.zeros((self.G, self.N), dtype=bool)
        for g, b in enumerate(self.block_sets):
            m[g, list(b)] = True
        return m

    def to_dict(self, d=None, group_sizes=None, bytes_per_param=4) -> dict:
        out = {"G": self.G, "N": self.N, "block_sets": [list(b) for b in self.block_sets],
               "total_blocks": self.total_blocks}
        if d is not None:
            out["d"] = d
        if d is not None and group_sizes is not None:
            out["bytes"] = int(sum(len(b) * int(s) * d * bytes_per_param
                                   for b, s in zip(self.block_sets, group_sizes)))
        return out

    @classmethod
    def from_dict(cls, obj) -> "ElasticConfig":
        return cls(tuple(tuple(b) for b in obj["block_sets"]), int(obj["N"]))

    def digest(self) -> str:
        payload = json.dumps({"N": self.N, "block_sets": [list(b) for b in self.block_sets]})
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def segment_sum(x: np.ndarray, N: int) -> np.ndarray:
    """Sum the N equal-length segments of the last axis: (..., N*d) -> (..., d)."""
    x = np.asarray(x)
    return x.reshape(*x.shape[:-1], N, x.shape[-1] // N).sum(axis=-2)


def score_full(u: np.ndarray, v: np.ndarray, N: int) -> float:
    """Score with every block of v selected (normalisation factor 1)."""
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    return float(segment_sum(u, N) @ segment_sum(v, N))


def score_elastic(u: np.ndarray, blocks: np.ndarray, block_set: Sequence[int],
                  max_blocks: int, N: int) -> float:
    """Score user u against the selected blocks (|B|, d) of one item."""
    if len(block_set) == 0:
        raise ValueError("empty block set")
    blocks = np.asarray(blocks).reshape(len(block_set), -1)
    return float(max_blocks / len(block_set) * (segment_sum(u, N) @ blocks.sum(axis=0)))


class ElasticItemStore:
    """Selected item blocks laid out group by group.

    ``groups`` holds, per item group, the member item ids, the sorted selected
    block indices and a (|B_g|, |V_g|, d) float32 array of those blocks. Both
    the host pipeline and a loaded device artifact rank through this class, so
    equal arrays give bit-identical rankings.
    """

    def __init__(self, groups, N: int, d: int, num_items: int):
        self.groups = [(np.asarray(m, dtype=np.int64), tuple(int(n) for n in b),
                        np.ascontiguousarray(blk, dtype=np.float32)) for m, b, blk in groups]
        self.N = N
        self.d = d
        self.num_items = num_items
        self.max_blocks = max(len(b) for _, b, _ in self.groups)

    @classmethod
    def from_item_embeddings(cls, item_final: np.ndarray, members, config: ElasticConfig):
        num_items, D = item_final.shape
        N = config.N
        d = D // N
        blocks = np.asarray(item_final, dtype=np.float32).reshape(num_items, N, d)
        groups = []
        for m, b in zip(members, config.block_sets):
            m = np.asarray(m, dtype=np.int64)
            groups.append((m, b, blocks[m][:, list(b), :].transpose(1, 0, 2)))
        return cls(groups, N, d, num_items)

    @property
    def config(self) -> ElasticConfig:
        return ElasticConfig(tuple(b for _, b, _ in self.groups), self.N)

    @property
    def payload_bytes(self) -> int:
        return int(sum(blk.nbytes for _, _, blk in self.groups))

    def item_vectors(self) -> np.ndarray:
        """(num_items, d) vectors z_j with score(u, j) = segment_sum(u) @ z_j."""
        z = np.zeros((self.num_items, self.d))
        for m, b, blk in self.groups:
            z[m] = self.max_blocks / len(b) * blk.astype(np.float64).sum(axis=0)
        return z

    def user_scores(self, u: np.ndarray, workers=None) -> np.ndarray:
        """Scores of one user against every item, one block at a time.

        With ``workers`` (a ThreadPoolExecutor) groups are scored concurrently;
        each group writes a disjoint slice so the result is order-independent.
        """
        s = segment_sum(np.asarray(u, dtype=np.float64), self.N)
        out = np.empty(self.num_items)

        def one(group):
            m, b, blk = group
            acc = blk[0] @ s
            for k in range(1, len(b)):
                acc += blk[k] @ s
            out[m] = self.max_blocks / len(b) * acc

        if workers is None:
            for grp in self.groups:
                one(grp)
        else:
            list(workers.map(one, self.groups))
        return out

    def rank(self, u, K=None, exclude=None, workers=None) -> np.ndarray:
        return rank_topk(self.user_scores(u, workers=workers), K, exclude)


def rank_topk(scores: np.ndarray, K: int | None = None, exclude=None) -> np.ndarray:
    """Item ids ordered by score descending, ties by id ascending, excluded ids removed."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if exclude is not None and len(exclude):
        keep = np.ones(len(scores), dtype=bool)
        keep[np.asarray(exclude, dtype=np.int64)] = False
        order = order[keep[order]]
    if K is not None:
        if K > len(scores):
            raise ValueError(f"K={K} exceeds the number of items ({len(scores)})")
        order = order[:K]
    return order


def topk_rows(scores: np.ndarray, exclude: sp.csr_matrix | None, K: int) -> np.ndarray:
    """Row-wise top-K over a (users, items) score matrix.

    Excluded entries (nonzeros of ``exclude`` restricted to the same rows) are
    pushed to -inf, so they only surface when a row has fewer than K candidates.
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    if exclude is not None:
        r, c = exclude.nonzero()
        scores[r, c] = -np.inf
    return np.argsort(-scores, axis=1, kind="stable")[:, :K]


def recall_at_k(ranked, ground_truth, K: int) -> float:
    truth = set(int(t) for t in ground_truth)
    if not truth:
        raise ValueError("empty ground truth")
    hits = sum(1 for i in ranked[:K] if int(i) in truth)
    return hits / len(truth)


def ndcg_at_k(ranked, ground_truth, K: int) -> float:
    truth = set(int(t) for t in ground_truth)
    if not truth:
        raise ValueError("empty ground truth")
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked[:K]) if int(i) in truth)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(K, len(truth))))
    return dcg / idcg


def _batch_metrics(top: np.ndarray, truth_rows: list[np.ndarray], ks) -> dict[str, np.ndarray]:
    maxk = top.shape[1]
    discounts = 1.0 / np.log2(np.arange(2, maxk + 2))
    hits = np.zeros(top.shape, dtype=bool)
    for r, truth in enumerate(truth_rows):
        hits[r] = np.isin(top[r], truth)
    sizes = np.array([len(t) for t in truth_rows], dtype=np.float64)
    out = {}
    for k in ks:
        out[f"recall@{k}"] = hits[:, :k].sum(axis=1) / sizes
        ideal = np.cumsum(discounts)[np.minimum(sizes.astype(int), k) - 1]
        out[f"ndcg@{k}"] = (hits[:, :k] * discounts[:k]).sum(axis=1) / ideal
    return out


def evaluate_vectors(user_segments: np.ndarray, item_vectors: np.ndarray,
                     train_matrix: sp.csr_matrix, holdout: dict[int, np.ndarray],
                     ks=(50, 100), users=None, chunk=1024) -> dict[str, float]:
    """Mean Recall@K / NDCG@K over users with a nonempty held-out set.

    ``user_segments`` are segment sums (num_users, d); ``item_vectors`` the
    matching (num_items, d) item side, so scores are their inner products.
    Users are processed in a fixed order, so the average is reproducible.
    """
    if users is None:
        users = np.fromiter(holdout.keys(), dtype=np.int64)
    users = np.asarray([u for u in users if u in holdout and len(holdout[u])], dtype=np.int64)
    if len(users) == 0:
        raise ValueError("no users with held-out items")
    maxk = min(max(ks), item_vectors.shape[0])
    sums = {f"{m}@{k}": 0.0 for k in ks for m in ("recall", "ndcg")}
    for start in range(0, len(users), chunk):
        batch = users[start:start + chunk]
        scores = user_segments[batch] @ item_vectors.T
        top = topk_rows(scores, train_matrix[batch], maxk)
        per = _batch_metrics(top, [holdout[int(u)] for u in batch], ks)
        for key, vals in per.items():
            sums[key] += float(vals.sum())
    return {key: val / len(users) for key, val in sums.items()}
