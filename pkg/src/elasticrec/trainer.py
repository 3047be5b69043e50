"""Block-structured embedding training with graph propagation and BPR.

Base user/item embeddings are propagated for L layers over the normalised
train graph; the final-layer item embedding of length D = N*d is the
concatenation of N blocks. Each mini-batch minimises the mean BPR loss minus
lam * sum_{n<n'} ||E_n - E_n'||_F^2, where E_n stacks block n of every item.
Gradients are derived by hand and flow back through every propagation layer.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import binio
from .dataset import InteractionDataset
from .scoring import evaluate_vectors, segment_sum

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RULE"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 8
    N: int = 16
    L: int = 2
    G: int = 20
    lam: float = 1e-4
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 2048
    negatives: int = 1
    seed: int = 0
    optimizer: str = "adam"
    init_std: float = 0.1
    clip_norm: float = 5.0
    eval_k: int = 50

    @property
    def D(self) -> int:
        return self.N * self.d

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if min(self.d, self.N) < 1 or self.L < 0:
            raise ValueError("need d, N >= 1 and L >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class BlockEmbeddingTable:
    user_base: np.ndarray
    item_base: np.ndarray
    user_final: np.ndarray
    item_final: np.ndarray
    N: int
    d: int
    L: int

    def __post_init__(self):
        if self.user_base.shape[1] != self.N * self.d or self.item_base.shape[1] != self.N * self.d:
            raise ValueError("embedding width must equal N * d")

    @property
    def D(self) -> int:
        return self.N * self.d

    @property
    def num_users(self) -> int:
        return self.user_base.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_base.shape[0]

    def item_blocks(self) -> np.ndarray:
        """Final item embeddings viewed as (num_items, N, d)."""
        return self.item_final.reshape(self.num_items, self.N, self.d)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            binio.write_header(fh, CHECKPOINT_MAGIC, (CHECKPOINT_VERSION, self.num_users,
                                                      self.num_items, self.N, self.d, self.L))
            for a in (self.user_final, self.item_final, self.user_base, self.item_base):
                binio.write_matrix(fh, a)

    @classmethod
    def load(cls, path) -> "BlockEmbeddingTable":
        with open(path, "rb") as fh:
            version, nu, ni, N, d, L = binio.read_header(fh, CHECKPOINT_MAGIC, 6)
            if version != CHECKPOINT_VERSION:
                raise binio.FormatError(f"unsupported checkpoint version {version}")
            D = N * d
            uf = binio.read_matrix(fh, (nu, D))
            itf = binio.read_matrix(fh, (ni, D))
            ub = binio.read_matrix(fh, (nu, D))
            ib = binio.read_matrix(fh, (ni, D))
        return cls(ub, ib, uf, itf, N, d, L)


def normalized_adjacency(train_matrix: sp.spmatrix) -> sp.csr_matrix:
    """users x items matrix with entries 1/sqrt(deg(u) * deg(i)) on train edges."""
    r = sp.csr_matrix(train_matrix, dtype=np.float64)
    du = np.asarray(r.sum(axis=1)).ravel()
    di = np.asarray(r.sum(axis=0)).ravel()
    if (du == 0).any() or (di == 0).any():
        raise ValueError(f"zero-degree node in train graph "
                         f"({int((du == 0).sum())} users, {int((di == 0).sum())} items)")
    coo = r.tocoo()
    vals = 1.0 / np.sqrt(du[coo.row] * di[coo.col])
    return sp.csr_matrix((vals, (coo.row, coo.col)), shape=r.shape)


def propagate(base_user, base_item, adj: sp.csr_matrix, L: int):
    """Run L layers of neighbour aggregation and return the layer-L embeddings.

    Each layer is u <- A v, v <- A^T u using the previous layer's values.
    The map is linear and self-adjoint, so it also back-propagates gradients.
    """
    u, v = base_user, base_item
    adj_t = adj.T.tocsr()
    for _ in range(L):
        u, v = adj @ v, adj_t @ u
    return u, v


def diversity_penalty(item_final: np.ndarray, N: int) -> float:
    """sum_{n<n'} ||E_n - E_n'||_F^2 over the N column blocks of item_final."""
    blocks = item_final.reshape(item_final.shape[0], N, -1)
    total = blocks.sum(axis=1)
    return float(N * (blocks ** 2).sum() - (total ** 2).sum())


def diversity_grad(item_final: np.ndarray, N: int) -> np.ndarray:
    blocks = item_final.reshape(item_final.shape[0], N, -1)
    g = 2.0 * (N * blocks - blocks.sum(axis=1, keepdims=True))
    return g.reshape(item_final.shape)


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def bpr_loss_and_grad(base_user, base_item, adj, triples, N: int, L: int, lam: float):
    """Loss and gradients w.r.t. the base embeddings for one batch.

    loss = -mean log sigmoid(r(u, j+) - r(u, j-)) - lam * diversity_penalty,
    with r the full-embedding score segment_sum(u) . segment_sum(v).
    """
    uf, vf = propagate(base_user, base_item, adj, L)
    u, pos, neg = triples[:, 0], triples[:, 1], triples[:, 2]
    su = segment_sum(uf[u], N)
    sp_ = segment_sum(vf[pos], N)
    sn = segment_sum(vf[neg], N)
    x = (su * (sp_ - sn)).sum(axis=1)
    pen = diversity_penalty(vf, N)
    loss = -_log_sigmoid(x).mean() - lam * pen

    # d(-log sigmoid(x))/dx = -sigmoid(-x)
    coef = -np.exp(_log_sigmoid(-x))[:, None] / len(x)
    g_su = coef * (sp_ - sn)
    g_sp = coef * su
    g_uf = np.zeros_like(uf)
    g_vf = -lam * diversity_grad(vf, N)
    # a segment sum spreads its gradient identically over all N segments
    np.add.at(g_uf, u, np.tile(g_su, N))
    np.add.at(g_vf, pos, np.tile(g_sp, N))
    np.add.at(g_vf, neg, -np.tile(g_sp, N))
    g_ub, g_ib = propagate(g_uf, g_vf, adj, L)
    return float(loss), g_ub, g_ib


class Adam:
    def __init__(self, shapes, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, shapes, lr=1e-2):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


def clip_global_norm(grads, max_norm: float):
    norm = float(np.sqrt(sum((g ** 2).sum() for g in grads)))
    if max_norm and norm > max_norm:
        grads = [g * (max_norm / norm) for g in grads]
    return grads, norm


def sample_negatives(dataset: InteractionDataset, users: np.ndarray, rng) -> np.ndarray:
    """One uniformly drawn non-train item per entry of ``users`` (rejection sampling)."""
    n_items = dataset.num_items
    known = np.sort(dataset.train[:, 0] * n_items + dataset.train[:, 1])
    neg = rng.integers(n_items, size=len(users))
    bad = np.flatnonzero(np.isin(users * n_items + neg, known, assume_unique=False))
    while len(bad):
        neg[bad] = rng.integers(n_items, size=len(bad))
        still = np.isin(users[bad] * n_items + neg[bad], known)
        bad = bad[still]
    return neg


class BPRTrainer:
    """Holds the base embeddings, optimiser state and train graph for stepping."""

    def __init__(self, dataset: InteractionDataset, config: TrainConfig):
        self.dataset = dataset
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        D = config.D
        self.user_base = self.rng.normal(0.0, config.init_std, (dataset.num_users, D))
        self.item_base = self.rng.normal(0.0, config.init_std, (dataset.num_items, D))
        self.adj = normalized_adjacency(dataset.train_matrix)
        opt_cls = Adam if config.optimizer == "adam" else SGD
        self.opt = opt_cls([self.user_base.shape, self.item_base.shape], lr=config.lr)

    def step(self, triples: np.ndarray) -> float:
        """One clipped optimiser step on a batch of (user, pos, neg) triples."""
        cfg = self.config
        loss, gu, gi = bpr_loss_and_grad(self.user_base, self.item_base, self.adj, triples,
                                         cfg.N, cfg.L, cfg.lam)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} (lr={cfg.lr}, lam={cfg.lam})")
        grads, _ = clip_global_norm([gu, gi], cfg.clip_norm)
        self.opt.step([self.user_base, self.item_base], grads)
        return loss

    def epoch_triples(self) -> np.ndarray:
        train = np.repeat(self.dataset.train, self.config.negatives, axis=0)
        neg = sample_negatives(self.dataset, train[:, 0], self.rng)
        triples = np.column_stack([train, neg])
        return triples[self.rng.permutation(len(triples))]

    def table(self) -> BlockEmbeddingTable:
        cfg = self.config
        uf, vf = propagate(self.user_base, self.item_base, self.adj, cfg.L)
        return BlockEmbeddingTable(self.user_base.copy(), self.item_base.copy(), uf, vf,
                                   cfg.N, cfg.d, cfg.L)


def full_model_metrics(table: BlockEmbeddingTable, dataset: InteractionDataset, split="val",
                       ks=(50,), users=None) -> dict[str, float]:
    return evaluate_vectors(segment_sum(table.user_final, table.N),
                            segment_sum(table.item_final, table.N),
                            dataset.train_matrix, dataset.holdout(split), ks=ks, users=users)


@dataclass
class TrainResult:
    table: BlockEmbeddingTable
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train(dataset: InteractionDataset, config: TrainConfig, callback=None) -> TrainResult:
    """Mini-batch training; returns the table from the best validation epoch.

    ``history`` has one row per epoch with the mean batch loss and the
    validation Recall@eval_k. Epoch 0 is the initialisation.
    """
    trainer = BPRTrainer(dataset, config)
    best = trainer.table()
    result = TrainResult(best, [], 0)
    if config.epochs == 0:
        return result
    has_val = len(dataset.val) > 0
    key = f"recall@{config.eval_k}"
    best_recall = -1.0
    for epoch in range(1, config.epochs + 1):
        triples = trainer.epoch_triples()
        losses = [trainer.step(triples[start:start + config.batch_size])
                  for start in range(0, len(triples), config.batch_size)]
        total = float(np.mean(losses))
        table = trainer.table()
        recall = full_model_metrics(table, dataset, "val", (config.eval_k,))[key] if has_val else float("nan")
        row = {"epoch": epoch, "loss": total, f"val_recall@{config.eval_k}": recall}
        result.history.append(row)
        log.info("epoch %d loss %.4f val %s %.5f", epoch, total, key, recall)
        if callback is not None:
            callback(row, table)
        if not has_val or recall > best_recall:
            best_recall = recall
            result.table, result.best_epoch = table, epoch
    if not all(np.isfinite(a).all() for a in (result.table.user_final, result.table.item_final)):
        raise TrainingDivergedError(f"non-finite embeddings (lr={config.lr}, lam={config.lam})")
    return result


def write_history(history: list[dict], path) -> None:
    if not history:
        Path(path).write_text("epoch,loss,val_recall@50\n")
        return
    cols = list(history[0])
    lines = [",".join(cols)] + [",".join(repr(float(r[c])) if c != "epoch" else str(r[c])
                                         for c in cols) for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
