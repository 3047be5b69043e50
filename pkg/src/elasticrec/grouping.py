"""Partition items into G near-equal groups that share block selections."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

STRATEGIES = ("random", "popularity", "clustering")


@dataclass(frozen=True, eq=False)
class GroupAssignment:
    members: tuple[np.ndarray, ...]
    strategy: str
    seed: int | None = None

    @property
    def G(self) -> int:
        return len(self.members)

    @property
    def num_items(self) -> int:
        return int(sum(len(m) for m in self.members))

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)

    @property
    def group_of(self) -> np.ndarray:
        out = np.empty(self.num_items, dtype=np.int64)
        for g, m in enumerate(self.members):
            out[m] = g
        return out

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed, "G": self.G,
                "members": [[int(i) for i in m] for m in self.members]}

    @classmethod
    def from_dict(cls, obj) -> "GroupAssignment":
        return cls(tuple(np.asarray(m, dtype=np.int64) for m in obj["members"]),
                   obj["strategy"], obj.get("seed"))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "GroupAssignment":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _check(num_items, G):
    if not 1 <= G <= num_items:
        raise ValueError(f"need 1 <= G <= num_items, got G={G}, num_items={num_items}")


def _chunk(order: np.ndarray, G: int) -> tuple[np.ndarray, ...]:
    # first (n % G) chunks receive one extra item
    return tuple(np.sort(c) for c in np.array_split(order, G))


def group_random(num_items: int, G: int, seed: int = 0) -> GroupAssignment:
    _check(num_items, G)
    perm = np.random.default_rng(seed).permutation(num_items)
    return GroupAssignment(_chunk(perm, G), "random", seed)


def group_by_popularity(item_degree, G: int) -> GroupAssignment:
    """Sort items by train degree (descending, ties by id) and chunk; group 0 is most popular."""
    deg = np.asarray(getattr(item_degree, "item_degree", item_degree))
    _check(len(deg), G)
    order = np.lexsort((np.arange(len(deg)), -deg))
    return GroupAssignment(tuple(np.array_split(order, G)), "popularity", None)


def pca(x: np.ndarray, k: int = 2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project onto the top-k covariance eigenvectors.

    Returns (projected, components (k, D), mean). Component signs are fixed so
    the largest-magnitude loading is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, np.argsort(vals)[::-1][:k]].T
    flip = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    return xc @ comps.T, comps, mean


def _sqdist(x, c):
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 300):
    """Lloyd's algorithm with k-means++ seeding. Returns (centroids, labels)."""
    rng = np.random.default_rng(seed)
    n = len(x)
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        idx = rng.choice(n, p=closest / total) if total > 0 else rng.integers(n)
        centroids[c] = x[idx]
        closest = np.minimum(closest, ((x - centroids[c]) ** 2).sum(axis=1))

    labels = None
    for _ in range(max_iter):
        dist = _sqdist(x, centroids)
        new = dist.argmin(axis=1)
        for c in range(k):
            if not (new == c).any():
                # reseed an empty cluster at the point farthest from its centroid,
                # taken from a cluster that can spare it
                counts = np.bincount(new, minlength=k)
                gap = np.where(counts[new] > 1, dist[np.arange(n), new], -1.0)
                far = int(gap.argmax())
                centroids[c] = x[far]
                new[far] = c
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            centroids[c] = x[labels == c].mean(axis=0)
    return centroids, labels


def balanced_assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Assign points to centroids under near-equal capacities.

    Every group gets floor(n/G) slots and n % G groups may take one more. Points
    are visited by distance to their nearest centroid (closest first) and take
    the nearest centroid that still has room.
    """
    n, G = len(x), len(centroids)
    base, extra = divmod(n, G)
    dist = _sqdist(x, centroids)
    order = np.lexsort((np.arange(n), dist.min(axis=1)))
    counts = np.zeros(G, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    for i in order:
        for g in np.argsort(dist[i], kind="stable"):
            if counts[g] < base or (counts[g] == base and extra > 0):
                if counts[g] == base:
                    extra -= 1
                counts[g] += 1
                labels[i] = g
                break
    return labels


def group_by_clustering(full_item_embeddings: np.ndarray, G: int, seed: int = 0,
                        max_iter: int = 300) -> GroupAssignment:
    x = np.asarray(full_item_embeddings, dtype=np.float64)
    _check(len(x), G)
    if not np.isfinite(x).all():
        raise ValueError("item embeddings contain non-finite values")
    proj, _, _ = pca(x, min(2, x.shape[1]))
    centroids, _ = kmeans(proj, G, seed=seed, max_iter=max_iter)
    labels = balanced_assign(proj, centroids)
    return GroupAssignment(tuple(np.flatnonzero(labels == g) for g in range(G)),
                           "clustering", seed)


def make_grouping(strategy: str, G: int, *, num_items=None, item_degree=None,
                  item_embeddings=None, seed=0) -> GroupAssignment:
    if strategy == "random":
        return group_random(num_items, G, seed)
    if strategy == "popularity":
        return group_by_popularity(item_degree, G)
    if strategy == "clustering":
        return group_by_clustering(item_embeddings, G, seed)
    raise ValueError(f"unknown grouping strategy {strategy!r}; expected one of {STRATEGIES}")
