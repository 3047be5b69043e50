"""Byte-accurate memory accounting and the memory-bounded config randomizer."""
from __future__ import annotations

import math

import numpy as np

from .scoring import ElasticConfig

BYTES_PER_PARAM = 4  # 32-bit floats
BYTES_PER_MB = 10 ** 6


class InfeasibleBudgetError(ValueError):
    pass


def mb_to_bytes(mb: float) -> int:
    return int(round(mb * BYTES_PER_MB))


def block_bytes(num_items: int, G: int, d: int) -> int:
    """Bytes of one group-level block, sized by the largest group."""
    return d * math.ceil(num_items / G) * BYTES_PER_PARAM


def min_feasible_bytes(num_items: int, G: int, d: int, D: int) -> int:
    return D * BYTES_PER_PARAM + G * block_bytes(num_items, G, d)


def blocks_for_budget(M: int, num_items: int, G: int, d: int, D: int) -> int:
    """Largest total block count that fits in M bytes next to one user embedding.

    Raises InfeasibleBudgetError if fewer than G blocks fit, since every group
    needs at least one block.
    """
    user = D * BYTES_PER_PARAM
    if M <= user:
        raise InfeasibleBudgetError(
            f"budget {M} B does not exceed one user embedding ({user} B); "
            f"minimum feasible budget is {min_feasible_bytes(num_items, G, d, D)} B")
    total = (M - user) // block_bytes(num_items, G, d)
    if total < G:
        raise InfeasibleBudgetError(
            f"budget {M} B fits {total} blocks but {G} groups need at least {G}; "
            f"minimum feasible budget is {min_feasible_bytes(num_items, G, d, D)} B")
    return int(total)


def config_bytes(config: ElasticConfig, group_sizes, d: int) -> int:
    """Exact bytes of the selected item blocks."""
    return int(sum(len(b) * int(n) * d * BYTES_PER_PARAM
                   for b, n in zip(config.block_sets, group_sizes)))


def fits_budget(config: ElasticConfig, group_sizes, d: int, D: int, M: int) -> bool:
    return config_bytes(config, group_sizes, d) + D * BYTES_PER_PARAM <= M


def random_config(M_blocks: int, N: int, G: int, rng) -> ElasticConfig:
    """Draw a config with at most M_blocks blocks in total.

    Per-group block counts come from a unit-variance Gaussian centred on
    M_blocks / G, rounded and clamped to [1, min(N, M_blocks - G + 1)]; random
    groups are then decremented until the total fits, and each group finally
    picks its count of distinct block indices uniformly.
    """
    if not G <= M_blocks <= N * G:
        raise InfeasibleBudgetError(f"need G <= M_blocks <= N*G, got M_blocks={M_blocks}, N={N}, G={G}")
    rng = np.random.default_rng(rng)
    mu = M_blocks / G
    upper = min(N, M_blocks - G + 1)
    counts = np.clip(np.rint(rng.normal(mu, 1.0, size=G)), 1, upper).astype(np.int64)
    while counts.sum() > M_blocks:
        g = rng.integers(G)
        if counts[g] > 1:
            counts[g] -= 1
    sets = [np.sort(rng.choice(N, size=int(s), replace=False)) for s in counts]
    return ElasticConfig(tuple(tuple(int(n) for n in b) for b in sets), N)
