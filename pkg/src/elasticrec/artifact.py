"""On-device artifact: selected item blocks plus one user embedding slot.

Layout (little-endian):

    magic "RULEDEV" | u32 version, G, N, d, num_items, user_id, num_seen
    32-byte sha256 digest of the item->group map
    per group: u32 |V_g|, u32 |B_g|, u32 block ids[|B_g|], u32 member ids[|V_g|]
    u32 seen item ids[num_seen]            (the user's own history, excluded when ranking)
    payload: per group, per selected block, a |V_g| x d float32 matrix
    user slot: D float32

Only the payload and the user slot count against the memory budget.
"""
from __future__ import annotations

import hashlib
import json
import statistics
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import binio
from .scoring import ElasticConfig, ElasticItemStore
from .search_space import BYTES_PER_PARAM

ARTIFACT_MAGIC = b"RULEDEV"
ARTIFACT_VERSION = 1


class BudgetExceededError(ValueError):
    def __init__(self, needed: int, budget: int):
        super().__init__(f"artifact needs {needed} B but the budget is {budget} B "
                         f"(over by {needed - budget} B)")
        self.needed, self.budget = needed, budget


def grouping_digest(members) -> bytes:
    h = hashlib.sha256()
    for m in members:
        h.update(struct.pack("<I", len(m)))
        h.update(np.asarray(m, dtype="<u4").tobytes())
    return h.digest()


@dataclass
class DeviceArtifact:
    store: ElasticItemStore
    user: np.ndarray
    user_id: int
    seen: np.ndarray
    digest: bytes

    def rank(self, K=None, workers=None) -> np.ndarray:
        return self.store.rank(self.user, K, self.seen, workers=workers)


def _u32(a) -> bytes:
    return np.asarray(a, dtype="<u4").tobytes()


def export_artifact(table, members, config: ElasticConfig, user_id: int, out_path,
                    budget_bytes: int, seen_items=(), token_map=None) -> dict:
    """Write the artifact for one user and return its manifest.

    Refuses (BudgetExceededError, nothing written) when the selected blocks
    plus the user slot exceed ``budget_bytes``. The manifest is also written
    next to the artifact as ``<out_path>.json``.
    """
    if config.G != len(members) or config.N != table.N:
        raise ValueError("config does not match the grouping / table")
    store = ElasticItemStore.from_item_embeddings(table.item_final, members, config)
    user = np.asarray(table.user_final[user_id], dtype=np.float32)
    user_bytes = user.size * BYTES_PER_PARAM
    counted = store.payload_bytes + user_bytes
    if counted > budget_bytes:
        raise BudgetExceededError(counted, budget_bytes)

    digest = grouping_digest(members)
    seen = np.asarray(sorted(int(i) for i in seen_items), dtype=np.int64)
    header = bytearray(ARTIFACT_MAGIC)
    header += struct.pack("<7I", ARTIFACT_VERSION, config.G, config.N, table.d,
                          table.num_items, user_id, len(seen))
    header += digest
    index = bytearray()
    for m, b, _ in store.groups:
        index += struct.pack("<2I", len(m), len(b)) + _u32(b) + _u32(m)
    index += _u32(seen)
    out_path = Path(out_path)
    with open(out_path, "wb") as fh:
        fh.write(header)
        fh.write(index)
        for _, _, blk in store.groups:
            for k in range(blk.shape[0]):
                binio.write_matrix(fh, blk[k])
        binio.write_matrix(fh, user)
    manifest = {
        "path": str(out_path),
        "user_id": int(user_id),
        "config_digest": config.digest(),
        "total_blocks": config.total_blocks,
        "sections": {"header": len(header), "index": len(index),
                     "payload": store.payload_bytes, "user_slot": user_bytes},
        "file_bytes": out_path.stat().st_size,
        "budget_bytes": int(budget_bytes),
        "counted_bytes": counted,
        "within_budget": True,
        "token_map": token_map,
    }
    Path(str(out_path) + ".json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_artifact(path) -> DeviceArtifact:
    with open(path, "rb") as fh:
        version, G, N, d, num_items, user_id, num_seen = binio.read_header(fh, ARTIFACT_MAGIC, 7)
        if version != ARTIFACT_VERSION:
            raise binio.FormatError(f"unsupported artifact version {version}")
        digest = fh.read(32)
        layout = []
        for _ in range(G):
            size, nb = struct.unpack("<2I", fh.read(8))
            blocks = np.frombuffer(fh.read(4 * nb), dtype="<u4").astype(np.int64)
            members = np.frombuffer(fh.read(4 * size), dtype="<u4").astype(np.int64)
            layout.append((members, blocks))
        seen = np.frombuffer(fh.read(4 * num_seen), dtype="<u4").astype(np.int64)
        groups = []
        for members, blocks in layout:
            blk = np.stack([binio.read_matrix(fh, (len(members), d)) for _ in blocks])
            groups.append((members, tuple(blocks), blk))
        user = binio.read_matrix(fh, (N * d,))
    if grouping_digest([m for m, _ in layout]) != digest:
        raise binio.FormatError("item-group digest mismatch")
    return DeviceArtifact(ElasticItemStore(groups, N, d, num_items), user, user_id, seen, digest)


def bench_inference(artifact_path, repetitions: int = 20, threads: int = 1, warmup: int = 2) -> dict:
    """Wall time of producing the user's full ranked item list from a loaded artifact."""
    art = load_artifact(artifact_path)
    times = []
    with threadpool_limits(limits=1):
        pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
        try:
            for r in range(warmup + repetitions):
                t0 = time.perf_counter()
                art.rank(workers=pool)
                if r >= warmup:
                    times.append((time.perf_counter() - t0) * 1e3)
        finally:
            if pool is not None:
                pool.shutdown()
    times.sort()
    p95 = times[min(len(times) - 1, int(np.ceil(0.95 * len(times))) - 1)]
    return {"mean_ms": statistics.fmean(times), "median_ms": statistics.median(times),
            "p95_ms": p95, "threads": threads, "repetitions": repetitions,
            "total_blocks": art.store.config.total_blocks}
