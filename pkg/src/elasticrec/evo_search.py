"""Estimator-guided evolutionary search over elastic configs."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .scoring import ElasticConfig
from .search_space import InfeasibleBudgetError, random_config


@dataclass(frozen=True)
class Candidate:
    config: ElasticConfig
    acc: float
    uid: int = 0  # insertion order, used for deterministic tie-breaking


@dataclass
class SearchParams:
    P: int = 20
    S: int = 5
    C: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.P < 1 or self.S < 1 or self.C < 0:
            raise ValueError(f"need P >= 1, S >= 1, C >= 0 (got P={self.P}, S={self.S}, C={self.C})")


@dataclass
class SearchResult:
    best: Candidate
    cache: list[Candidate]
    rounds: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def report(self) -> dict:
        return {"best_acc": self.best.acc, "config": self.best.config.to_dict(),
                "rounds": self.rounds, "cache_size": len(self.cache),
                "wall_time_s": self.wall_time}


def mutate(parent: ElasticConfig, rng) -> ElasticConfig:
    """Either swap the block sets of two random groups or redraw one group's set.

    Both operators keep every group's block count (as a multiset), so the total
    stays constant and the child stays within the parent's budget. With a
    single group only the redraw is possible.
    """
    rng = np.random.default_rng(rng)
    sets = list(parent.block_sets)
    G, N = parent.G, parent.N
    if G > 1 and rng.random() < 0.5:
        g, h = rng.choice(G, size=2, replace=False)
        sets[g], sets[h] = sets[h], sets[g]
    else:
        g = int(rng.integers(G))
        size = len(sets[g])
        sets[g] = tuple(int(n) for n in np.sort(rng.choice(N, size=size, replace=False)))
    return ElasticConfig(tuple(sets), N)


def _best(cands):
    return max(cands, key=lambda c: (c.acc, -c.uid))


def _worst(cands):
    return min(cands, key=lambda c: (c.acc, c.uid))


def search(M_blocks: int, params: SearchParams, estimator: Callable[[ElasticConfig], float],
           N: int, G: int, rerank: Callable[[ElasticConfig], float] | None = None,
           rerank_k: int = 5) -> SearchResult:
    """Tournament-based evolution; returns the highest-scoring cached candidate.

    The population starts with P random configs under the block budget. Each
    of C rounds samples S members with replacement, mutates the best of them,
    scores the child, adds it, then drops the lowest-scoring member. With
    ``rerank`` the top ``rerank_k`` cached candidates are re-scored by that
    function and the best of those is returned instead.
    """
    if not G <= M_blocks <= N * G:
        raise InfeasibleBudgetError(f"need G <= M_blocks <= N*G, got {M_blocks} (N={N}, G={G})")
    t0 = time.perf_counter()
    rng = np.random.default_rng(params.seed)
    seed_pop: list[Candidate] = []
    cache: list[Candidate] = []
    while len(seed_pop) < params.P:
        cfg = random_config(M_blocks, N, G, rng)
        cand = Candidate(cfg, float(estimator(cfg)), len(cache))
        seed_pop.append(cand)
        cache.append(cand)

    rounds = []
    for c in range(params.C):
        picks = rng.integers(len(seed_pop), size=params.S)
        parent = _best([seed_pop[i] for i in picks])
        child_cfg = mutate(parent.config, rng)
        child = Candidate(child_cfg, float(estimator(child_cfg)), len(cache))
        seed_pop.append(child)
        cache.append(child)
        seed_pop.remove(_worst(seed_pop))
        rounds.append({"round": c + 1, "parent_acc": parent.acc, "child_acc": child.acc,
                       "best_acc": _best(seed_pop).acc, "worst_acc": _worst(seed_pop).acc})

    best = _best(cache)
    if rerank is not None:
        top = sorted(cache, key=lambda c: (-c.acc, c.uid))[:rerank_k]
        rescored = [Candidate(c.config, float(rerank(c.config)), c.uid) for c in top]
        best = _best(rescored)
    return SearchResult(best, cache, rounds, time.perf_counter() - t0)
