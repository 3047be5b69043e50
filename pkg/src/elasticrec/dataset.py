"""Interaction log ingestion, degree filtering and per-user splitting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DELIMITERS = {"tsv": "\t", "csv": ","}


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.line_no = line_no


@dataclass
class RawInteractions:
    """Deduplicated (user, item) index pairs plus the token for each index."""

    pairs: np.ndarray  # (n, 2) int64
    user_tokens: list[str]
    item_tokens: list[str]

    @property
    def num_users(self) -> int:
        return len(self.user_tokens)

    @property
    def num_items(self) -> int:
        return len(self.item_tokens)

    def __len__(self):
        return len(self.pairs)


def load_interactions(path, fmt: str = "tsv", delimiter: str | None = None,
                      skip_header: bool = False) -> RawInteractions:
    """Read a delimited user/item log.

    Tokens are mapped to dense indices in first-seen order. Columns beyond the
    second (ratings, timestamps) are ignored and repeated pairs are collapsed.
    """
    if delimiter is None:
        if fmt not in DELIMITERS:
            raise DatasetError(f"unknown format {fmt!r}; expected one of {sorted(DELIMITERS)}")
        delimiter = DELIMITERS[fmt]
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    seen = set()
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if skip_header and line_no == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split(delimiter)
            if len(cols) < 2 or not cols[0].strip() or not cols[1].strip():
                raise ParseError(path, line_no, f"expected user and item columns, got {line!r}")
            u = users.setdefault(cols[0].strip(), len(users))
            i = items.setdefault(cols[1].strip(), len(items))
            if (u, i) not in seen:
                seen.add((u, i))
                pairs.append((u, i))
    if not pairs:
        raise EmptyDatasetError(f"{path}: no interactions")
    return RawInteractions(np.asarray(pairs, dtype=np.int64), list(users), list(items))


def from_pairs(pairs, user_tokens=None, item_tokens=None) -> RawInteractions:
    """Wrap an index-pair array (already dense) as raw interactions, deduplicating."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyDatasetError("no interactions")
    _, first = np.unique(pairs, axis=0, return_index=True)
    pairs = pairs[np.sort(first)]
    nu = int(pairs[:, 0].max()) + 1
    ni = int(pairs[:, 1].max()) + 1
    user_tokens = user_tokens or [str(u) for u in range(nu)]
    item_tokens = item_tokens or [str(i) for i in range(ni)]
    return RawInteractions(pairs, list(user_tokens), list(item_tokens))


def filter_by_min_degree(raw: RawInteractions, min_user_deg: int,
                         min_item_deg: int) -> RawInteractions:
    """Drop users/items below the degree thresholds until nothing changes.

    Surviving users and items are re-indexed densely, preserving their
    relative order, and the token lists are carried along.
    """
    if min_user_deg < 1 or min_item_deg < 1:
        raise DatasetError("minimum degrees must be >= 1")
    pairs = raw.pairs
    while True:
        udeg = np.bincount(pairs[:, 0], minlength=raw.num_users)
        ideg = np.bincount(pairs[:, 1], minlength=raw.num_items)
        keep = (udeg[pairs[:, 0]] >= min_user_deg) & (ideg[pairs[:, 1]] >= min_item_deg)
        if keep.all():
            break
        pairs = pairs[keep]
        if len(pairs) == 0:
            raise EmptyDatasetError(
                f"degree filter (users>={min_user_deg}, items>={min_item_deg}) removed every interaction")
    users = np.unique(pairs[:, 0])
    items = np.unique(pairs[:, 1])
    umap = np.full(raw.num_users, -1, dtype=np.int64)
    imap = np.full(raw.num_items, -1, dtype=np.int64)
    umap[users] = np.arange(len(users))
    imap[items] = np.arange(len(items))
    new_pairs = np.stack([umap[pairs[:, 0]], imap[pairs[:, 1]]], axis=1)
    return RawInteractions(new_pairs,
                           [raw.user_tokens[u] for u in users],
                           [raw.item_tokens[i] for i in items])


def _split_counts(n: int, ratios) -> tuple[int, int, int]:
    # train = ceil, val = floor, test = remainder; 1e-9 guards float noise like 0.7*10
    n_train = min(n, max(1, math.ceil(ratios[0] * n - 1e-9)))
    n_val = min(n - n_train, math.floor(ratios[1] * n + 1e-9))
    return n_train, n_val, n - n_train - n_val


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    num_users: int
    num_items: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    user_tokens: list[str] = field(repr=False)
    item_tokens: list[str] = field(repr=False)
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    min_user_deg: int = 1
    min_item_deg: int = 1

    @cached_property
    def train_matrix(self) -> sp.csr_matrix:
        """Binary users x items matrix of train interactions."""
        data = np.ones(len(self.train), dtype=np.float64)
        return sp.csr_matrix((data, (self.train[:, 0], self.train[:, 1])),
                             shape=(self.num_users, self.num_items))

    @cached_property
    def user_degree(self) -> np.ndarray:
        return np.bincount(self.train[:, 0], minlength=self.num_users)

    @cached_property
    def item_degree(self) -> np.ndarray:
        return np.bincount(self.train[:, 1], minlength=self.num_items)

    @cached_property
    def user_items(self) -> list[np.ndarray]:
        m = self.train_matrix
        return [m.indices[m.indptr[u]:m.indptr[u + 1]] for u in range(self.num_users)]

    @cached_property
    def item_users(self) -> list[np.ndarray]:
        m = self.train_matrix.tocsc()
        return [m.indices[m.indptr[i]:m.indptr[i + 1]] for i in range(self.num_items)]

    def holdout(self, split: str) -> dict[int, np.ndarray]:
        """Map user -> held-out item array for 'val' or 'test' (users with none omitted)."""
        pairs = {"val": self.val, "test": self.test}[split]
        out: dict[int, list] = {}
        for u, i in pairs:
            out.setdefault(int(u), []).append(int(i))
        return {u: np.asarray(v, dtype=np.int64) for u, v in sorted(out.items())}

    def manifest(self) -> dict:
        return {
            "num_users": self.num_users,
            "num_items": self.num_items,
            "num_train": len(self.train),
            "num_val": len(self.val),
            "num_test": len(self.test),
            "ratios": list(self.ratios),
            "seed": self.seed,
            "min_user_deg": self.min_user_deg,
            "min_item_deg": self.min_item_deg,
        }


def split(raw: RawInteractions, ratios=(0.7, 0.1, 0.2), seed: int = 0,
          min_user_deg: int = 1, min_item_deg: int = 1) -> InteractionDataset:
    """Partition each user's interactions into train/val/test by ``ratios``.

    Every user keeps at least one train interaction. Items left without any
    train interaction are removed (with their held-out pairs) and the item
    index is re-densified, so every node of the train graph has degree >= 1.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or ratios[0] <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must be (train>0, val>=0, test>=0) summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    order = np.lexsort((raw.pairs[:, 1], raw.pairs[:, 0]))
    pairs = raw.pairs[order]
    bounds = np.flatnonzero(np.diff(pairs[:, 0])) + 1
    parts = {"train": [], "val": [], "test": []}
    for chunk in np.split(pairs, bounds):
        chunk = chunk[rng.permutation(len(chunk))]
        a, b, _ = _split_counts(len(chunk), ratios)
        parts["train"].append(chunk[:a])
        parts["val"].append(chunk[a:a + b])
        parts["test"].append(chunk[a + b:])
    arrays = {k: (np.concatenate(v) if v else np.empty((0, 2), np.int64)) for k, v in parts.items()}
    item_tokens = raw.item_tokens
    num_items = raw.num_items
    ideg = np.bincount(arrays["train"][:, 1], minlength=num_items)
    if (ideg == 0).any():
        # items whose every interaction landed in val/test cannot be propagated; drop them
        keep = np.flatnonzero(ideg > 0)
        imap = np.full(num_items, -1, dtype=np.int64)
        imap[keep] = np.arange(len(keep))
        for k, arr in arrays.items():
            arr = arr[imap[arr[:, 1]] >= 0]
            arrays[k] = np.stack([arr[:, 0], imap[arr[:, 1]]], axis=1)
        item_tokens = [item_tokens[i] for i in keep]
        num_items = len(keep)
    return InteractionDataset(raw.num_users, num_items, arrays["train"], arrays["val"],
                              arrays["test"], raw.user_tokens, item_tokens, ratios, seed,
                              min_user_deg, min_item_deg)


def ingest(path, fmt="tsv", delimiter=None, skip_header=False, min_user_deg=10,
           min_item_deg=10, ratios=(0.7, 0.1, 0.2), seed=0) -> InteractionDataset:
    raw = load_interactions(path, fmt=fmt, delimiter=delimiter, skip_header=skip_header)
    raw = filter_by_min_degree(raw, min_user_deg, min_item_deg)
    return split(raw, ratios, seed, min_user_deg, min_item_deg)


def _write_pairs(path: Path, pairs: np.ndarray):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i in pairs:
            fh.write(f"{u}\t{i}\n")


def _write_tokens(path: Path, tokens):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for idx, tok in enumerate(tokens):
            fh.write(f"{idx}\t{tok}\n")


def save_dataset(ds: InteractionDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        _write_pairs(directory / f"{name}.tsv", getattr(ds, name))
    _write_tokens(directory / "user_tokens.tsv", ds.user_tokens)
    _write_tokens(directory / "item_tokens.tsv", ds.item_tokens)
    (directory / "manifest.json").write_text(json.dumps(ds.manifest(), indent=2) + "\n")


def _read_pairs(path: Path) -> np.ndarray:
    if path.stat().st_size == 0:
        return np.empty((0, 2), dtype=np.int64)
    return np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)


def _read_tokens(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split("\t", 1)[1] for line in fh]


def load_dataset(directory) -> InteractionDataset:
    directory = Path(directory)
    meta = json.loads((directory / "manifest.json").read_text())
    return InteractionDataset(
        meta["num_users"], meta["num_items"],
        _read_pairs(directory / "train.tsv"),
        _read_pairs(directory / "val.tsv"),
        _read_pairs(directory / "test.tsv"),
        _read_tokens(directory / "user_tokens.tsv"),
        _read_tokens(directory / "item_tokens.tsv"),
        tuple(meta["ratios"]), meta["seed"], meta["min_user_deg"], meta["min_item_deg"],
    )
