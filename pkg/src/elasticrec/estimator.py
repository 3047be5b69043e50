"""Factorised performance estimator over elastic configs.

Each group g is encoded as [one-hot(g), multi-hot(B_g)] of length G+N and
projected to x_g = W @ enc_g. The prediction is

    y_hat = w . relu(A @ sum_{g<g'} x_g * x_g' + c) + b

The pairwise sum uses 0.5 * ((sum_g x_g)^2 - sum_g x_g^2).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .dataset import InteractionDataset
from .scoring import ElasticConfig, ElasticItemStore, evaluate_vectors, segment_sum
from .search_space import random_config

log = logging.getLogger(__name__)

ESTIMATOR_MAGIC = b"RULEEST"
ESTIMATOR_VERSION = 1


class EstimatorDivergedError(RuntimeError):
    pass


@dataclass
class EstimatorParams:
    W: np.ndarray  # (d0, G+N)
    A: np.ndarray  # (d0, d0)
    c: np.ndarray  # (d0,)
    w: np.ndarray  # (d0,)
    b: float
    G: int
    N: int

    @property
    def d0(self) -> int:
        return self.W.shape[0]

    @classmethod
    def init(cls, G: int, N: int, d0: int, seed=0) -> "EstimatorParams":
        rng = np.random.default_rng(seed)
        # keeps the O(G^2) pairwise sum at unit scale
        W = rng.normal(0.0, 1.0 / np.sqrt((G + N) * max(G, 1)), (d0, G + N))
        A = rng.normal(0.0, 1.0 / np.sqrt(d0), (d0, d0))
        w = rng.normal(0.0, 1.0 / np.sqrt(d0), d0)
        return cls(W, A, np.zeros(d0), w, 0.0, G, N)

    def copy(self) -> "EstimatorParams":
        return EstimatorParams(self.W.copy(), self.A.copy(), self.c.copy(), self.w.copy(),
                               float(self.b), self.G, self.N)

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.A, self.c, self.w]

    def __call__(self, config: ElasticConfig) -> float:
        return estimate(config, self)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            binio.write_header(fh, ESTIMATOR_MAGIC, (ESTIMATOR_VERSION, self.G, self.N, self.d0))
            for a in (self.W, self.A, self.c, self.w, np.array([self.b])):
                binio.write_matrix(fh, a)

    @classmethod
    def load(cls, path) -> "EstimatorParams":
        with open(path, "rb") as fh:
            version, G, N, d0 = binio.read_header(fh, ESTIMATOR_MAGIC, 4)
            if version != ESTIMATOR_VERSION:
                raise binio.FormatError(f"unsupported estimator version {version}")
            W = binio.read_matrix(fh, (d0, G + N)).astype(np.float64)
            A = binio.read_matrix(fh, (d0, d0)).astype(np.float64)
            c = binio.read_matrix(fh, (d0,)).astype(np.float64)
            w = binio.read_matrix(fh, (d0,)).astype(np.float64)
            b = float(binio.read_matrix(fh, (1,))[0])
        return cls(W, A, c, w, b, G, N)


@dataclass
class EstimatorSample:
    config: ElasticConfig
    measured: float

    def to_json(self) -> str:
        return json.dumps({"config": self.config.to_dict(), "y": self.measured})

    @classmethod
    def from_json(cls, line: str) -> "EstimatorSample":
        obj = json.loads(line)
        return cls(ElasticConfig.from_dict(obj["config"]), float(obj["y"]))


def save_samples(samples, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def load_samples(path) -> list[EstimatorSample]:
    with open(path, encoding="utf-8") as fh:
        return [EstimatorSample.from_json(line) for line in fh if line.strip()]


def encode_group(g: int, block_set, G: int, N: int) -> np.ndarray:
    enc = np.zeros(G + N)
    enc[g] = 1.0
    enc[G + np.asarray(block_set, dtype=np.int64)] = 1.0
    return enc


def encode_config(config: ElasticConfig) -> np.ndarray:
    """(G, G+N) raw group encodings."""
    return np.hstack([np.eye(config.G), config.mask().astype(np.float64)])


def pairwise_sum(x: np.ndarray) -> np.ndarray:
    """sum_{g<g'} x_g * x_g' over axis -2, via the sum-of-squares identity."""
    s = x.sum(axis=-2)
    return 0.5 * (s * s - (x * x).sum(axis=-2))


def _forward(params: EstimatorParams, enc: np.ndarray):
    x = enc @ params.W.T                  # (B, G, d0)
    p = pairwise_sum(x)                   # (B, d0)
    z = p @ params.A.T + params.c         # (B, d0)
    h = np.maximum(z, 0.0)
    return h @ params.w + params.b, (x, p, z, h)


def predict(params: EstimatorParams, enc: np.ndarray) -> np.ndarray:
    return _forward(params, enc)[0]


def estimate(config: ElasticConfig, params: EstimatorParams) -> float:
    if config.G != params.G or config.N != params.N:
        raise ValueError(f"config (G={config.G}, N={config.N}) does not match estimator "
                         f"(G={params.G}, N={params.N})")
    return float(predict(params, encode_config(config)[None])[0])


def loss_and_grad(params: EstimatorParams, enc: np.ndarray, y: np.ndarray):
    """Summed squared error and its gradients (dW, dA, dc, dw, db)."""
    y_hat, (x, p, z, h) = _forward(params, enc)
    r = y_hat - y
    loss = float((r * r).sum())
    g_yhat = 2.0 * r                                 # (B,)
    g_w = h.T @ g_yhat
    g_b = float(g_yhat.sum())
    g_z = np.outer(g_yhat, params.w) * (z > 0)       # (B, d0)
    g_A = g_z.T @ p
    g_c = g_z.sum(axis=0)
    g_p = g_z @ params.A                             # (B, d0)
    # d p / d x_g = (sum_g' x_g') - x_g
    g_x = g_p[:, None, :] * (x.sum(axis=1, keepdims=True) - x)
    g_W = np.einsum("bgk,bgi->ki", g_x, enc)
    return loss, [g_W, g_A, g_c, g_w], g_b


class _Adam:
    def __init__(self, arrays, lr):
        self.lr = lr
        self.m = [np.zeros_like(a) for a in arrays] + [0.0]
        self.v = [np.zeros_like(a) for a in arrays] + [0.0]
        self.t = 0

    def step(self, params: EstimatorParams, grads, g_b):
        self.t += 1
        c1, c2 = 1 - 0.9 ** self.t, 1 - 0.999 ** self.t
        for k, (a, g) in enumerate(zip(params.arrays(), grads)):
            self.m[k] = 0.9 * self.m[k] + 0.1 * g
            self.v[k] = 0.999 * self.v[k] + 0.001 * g * g
            a -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + 1e-8)
        self.m[-1] = 0.9 * self.m[-1] + 0.1 * g_b
        self.v[-1] = 0.999 * self.v[-1] + 0.001 * g_b * g_b
        params.b -= self.lr * (self.m[-1] / c1) / (np.sqrt(self.v[-1] / c2) + 1e-8)


def rmse(params: EstimatorParams, enc, y) -> float:
    return float(np.sqrt(np.mean((predict(params, enc) - y) ** 2)))


def _fit(enc, y, G, N, d0, seed, epochs, lr, batch_size, snapshot_epochs=()):
    """Adam on standardised targets; returns params in the original target units.

    The returned parameters (and each snapshot) are those of the epoch with the
    lowest training RMSE so far, so a late collapse of the ReLU layer cannot
    discard an earlier good fit.
    """
    rng = np.random.default_rng(seed)
    mean = float(y.mean())
    # a floor keeps (near-)constant targets from amplifying optimiser jitter
    std = max(float(y.std()), 1e-3)
    z = (y - mean) / std
    params = EstimatorParams.init(G, N, d0, seed)
    opt = _Adam(params.arrays(), lr)
    history, snaps = [], {}
    rises, prev = 0, np.inf
    best, best_err = params.copy(), np.inf

    def unscaled(p):
        out = p.copy()
        out.w *= std
        out.b = out.b * std + mean
        return out

    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(z))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            _, grads, g_b = loss_and_grad(params, enc[idx], z[idx])
            grads = [g / len(idx) for g in grads]
            opt.step(params, grads, g_b / len(idx))
        err = rmse(params, enc, z) * std
        if not np.isfinite(err):
            raise EstimatorDivergedError(f"non-finite RMSE at epoch {epoch} (lr={lr}, d0={d0})")
        history.append(err)
        rises = rises + 1 if err > prev else 0
        prev = err
        if err < best_err:
            best, best_err = params.copy(), err
        if rises >= 10:
            raise EstimatorDivergedError(
                f"training RMSE rose for 10 consecutive epochs (epoch {epoch}, rmse={err:.4g}, "
                f"lr={lr}, d0={d0})")
        if epoch in snapshot_epochs:
            snaps[epoch] = unscaled(best)
    return unscaled(best), history, snaps


@dataclass
class EstimatorReport:
    lr: float
    d0: int
    train_rmse: float
    cv: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "d0": self.d0, "train_rmse": self.train_rmse,
                "cv_rmse": {str(k): v for k, v in self.cv.items()},
                "history": self.history}


DEFAULT_LR_GRID = (1e-3, 3e-3, 1e-2)


def train_estimator(samples, d0: int = 64, seed: int = 0, epochs: int = 300, lr: float | None = None,
                    lr_grid=DEFAULT_LR_GRID, batch_size: int = 64, snapshot_fractions=()):
    """Fit the estimator to (config, measured) samples by mean squared error.

    Unless a fixed ``lr`` is given, two-fold cross-validation picks the
    learning rate in ``lr_grid`` with the lowest held-out RMSE, then the model
    is refit on all samples. ``snapshot_fractions`` (e.g. (0.25, 0.5)) stores
    intermediate parameters in the report.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    G, N = samples[0].config.G, samples[0].config.N
    enc = np.stack([encode_config(s.config) for s in samples])
    y = np.array([s.measured for s in samples], dtype=np.float64)
    if lr is not None:
        grid = [lr]
    elif lr_grid:
        grid = list(lr_grid)
    else:
        raise ValueError("need a fixed lr or a non-empty lr_grid")
    cv = {}
    if len(grid) > 1:
        perm = np.random.default_rng(seed).permutation(len(y))
        folds = np.array_split(perm, 2)
        for cand in grid:
            errs = []
            for k in range(2):
                tr, te = folds[1 - k], folds[k]
                p, _, _ = _fit(enc[tr], y[tr], G, N, d0, seed, epochs, cand, batch_size)
                errs.append(rmse(p, enc[te], y[te]))
            cv[cand] = float(np.mean(errs))
        best_lr = min(grid, key=lambda c: cv[c])
    else:
        best_lr = grid[0]
    snap_epochs = {max(1, int(round(f * epochs))): f for f in snapshot_fractions}
    params, history, snaps = _fit(enc, y, G, N, d0, seed, epochs, best_lr, batch_size,
                                  tuple(snap_epochs))
    report = EstimatorReport(best_lr, d0, rmse(params, enc, y), cv, history,
                             {snap_epochs[e]: p for e, p in snaps.items()})
    log.info("estimator lr=%g train rmse=%.5f", best_lr, report.train_rmse)
    return params, report


class ConfigEvaluator:
    """Measures a config's ranking quality on a fixed user subset."""

    def __init__(self, item_final, members, user_final, N, dataset: InteractionDataset,
                 split="val", users=None, metric="recall", k=100):
        self.item_final = item_final
        self.members = members
        self.N = N
        self.user_segments = segment_sum(np.asarray(user_final, dtype=np.float64), N)
        self.train_matrix = dataset.train_matrix
        self.holdout = dataset.holdout(split)
        self.users = users
        self.key = f"{metric}@{k}"
        self.k = k

    def __call__(self, config: ElasticConfig) -> float:
        store = ElasticItemStore.from_item_embeddings(self.item_final, self.members, config)
        return evaluate_vectors(self.user_segments, store.item_vectors(), self.train_matrix,
                                self.holdout, ks=(self.k,), users=self.users)[self.key]


def sample_eval_users(dataset: InteractionDataset, mu: int, seed=0, split="val") -> np.ndarray:
    candidates = np.fromiter(dataset.holdout(split).keys(), dtype=np.int64)
    if mu > len(candidates):
        log.warning("mu=%d exceeds %d users with %s items; using all of them",
                    mu, len(candidates), split)
        mu = len(candidates)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(candidates, size=mu, replace=False))


def build_training_set(table, dataset: InteractionDataset, grouping, N: int, G: int,
                       beta: int, mu: int, seed=0, metric="recall", k=100):
    """Sample beta configs at uniformly drawn block budgets and measure each.

    All configs are scored on the same mu validation users, drawn once.
    """
    rng = np.random.default_rng(seed)
    users = sample_eval_users(dataset, mu, seed)
    evaluator = ConfigEvaluator(table.item_final, grouping.members, table.user_final, N,
                                dataset, "val", users, metric, k)
    samples = []
    for _ in range(beta):
        m = int(rng.integers(G, N * G + 1))
        config = random_config(m, N, G, rng)
        samples.append(EstimatorSample(config, evaluator(config)))
    return samples
