"""Offline fine-tuning of the search-side transform and codebook.

The training signal is self-supervised: for sampled queries and their
approximate neighbors, three softmax score distributions are compared.
S_o comes from exact full-dimension scores, S_r from scoring the reduced
query against insert-side reductions of the neighbors, and S_q from
scoring it against quantized reconstructions whose code indices come from
the fixed codebook but whose centroid values are learnable. The loss is
KL(S_o || S_r) + lambda * KL(S_o || S_q), summed over samples, minimized
with an adaptive-moment optimizer with decoupled weight decay. All
training math runs in float64; parameters go back to float32 on install.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .clustering import sample_rows
from .core import Dataset, Metric, Transform, as_f32c
from .index import FilterRefineIndex, ParamSet, SearchConfig
from .ivf import IVFCentroids, assign_rows
from .pq import KSUB, PQCodebook, _encode64


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite; carries the epoch."""

    def __init__(self, epoch: int) -> None:
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainingSet:
    """Sampled queries with K approximate neighbors each, vectors attached."""

    queries: np.ndarray  # (n_s, d) float32
    neighbor_ids: np.ndarray  # (n_s, K) int64
    neighbor_vecs: np.ndarray  # (n_s, K, d) float32
    n_train: int

    def __post_init__(self) -> None:
        self.queries = as_f32c(self.queries)
        self.neighbor_ids = np.ascontiguousarray(self.neighbor_ids, dtype=np.int64)
        self.neighbor_vecs = np.ascontiguousarray(self.neighbor_vecs, dtype=np.float32)
        n_s = self.queries.shape[0]
        if self.neighbor_ids.shape[0] != n_s or self.neighbor_vecs.shape[0] != n_s:
            raise ValueError("row counts disagree")
        if not 1 <= self.n_train <= n_s:
            raise ValueError("need at least one training row and one validation row")

    @property
    def n_s(self) -> int:
        return self.queries.shape[0]

    @property
    def k(self) -> int:
        return self.neighbor_ids.shape[1]

    @property
    def d(self) -> int:
        return self.queries.shape[1]

    def save(self, path: str) -> None:
        """Binary layout: [n_s, K, d, query rows f32, neighbor ids u64]."""
        with open(path, "wb") as f:
            f.write(struct.pack("<III", self.n_s, self.k, self.d))
            f.write(self.queries.astype("<f4").tobytes())
            f.write(self.neighbor_ids.astype("<u8").tobytes())

    @classmethod
    def load(
        cls, path: str, lookup: Callable[[int], np.ndarray], val_fraction: float = 0.1
    ) -> "TrainingSet":
        with open(path, "rb") as f:
            buf = f.read()
        n_s, k, d = struct.unpack_from("<III", buf, 0)
        off = 12
        queries = np.frombuffer(buf, dtype="<f4", count=n_s * d, offset=off).reshape(n_s, d)
        off += 4 * n_s * d
        ids = np.frombuffer(buf, dtype="<u8", count=n_s * k, offset=off)
        ids = ids.astype(np.int64).reshape(n_s, k)
        vecs = np.empty((n_s, k, d), dtype=np.float32)
        for i in range(n_s):
            for j in range(k):
                vecs[i, j] = lookup(int(ids[i, j]))
        return cls(queries.copy(), ids, vecs, _train_rows(n_s, val_fraction))


def _train_rows(n_s: int, val_fraction: float) -> int:
    n_val = min(n_s - 1, max(1, int(round(n_s * val_fraction))))
    return n_s - n_val


def prepare_training_set(
    index: FilterRefineIndex,
    n_s: int,
    k_neighbors: int,
    nprobe: int,
    k_factor: int = 10,
    seed: int = 0,
    val_fraction: float = 0.1,
) -> TrainingSet:
    """Sample stored vectors and fetch their approximate neighbors."""
    all_ids = index.full.ids_sorted()
    if all_ids.size < k_neighbors + 1:
        raise ValueError(f"index holds {all_ids.size} vectors, need K+1={k_neighbors + 1}")
    if n_s < 2:
        raise ValueError("need at least 2 samples to reserve validation data")
    rng = np.random.default_rng(seed)
    picked = all_ids[sample_rows(all_ids.size, n_s, rng)]
    cfg = SearchConfig(k=k_neighbors + 1, k_factor=k_factor, nprobe=nprobe)
    d = index.insert_params.d
    queries = np.empty((len(picked), d), dtype=np.float32)
    nbr_ids = np.empty((len(picked), k_neighbors), dtype=np.int64)
    nbr_vecs = np.empty((len(picked), k_neighbors, d), dtype=np.float32)
    for row, qid in enumerate(picked):
        queries[row] = index.full.get(int(qid))
        res = index.search(queries[row], cfg)
        ids = res.ids[res.ids != qid][:k_neighbors]
        if ids.shape[0] < k_neighbors:
            raise ValueError(
                f"query {int(qid)} returned {ids.shape[0]} neighbors; raise nprobe/k_factor"
            )
        nbr_ids[row] = ids
        for j, nid in enumerate(ids):
            nbr_vecs[row, j] = index.full.get(int(nid))
    return TrainingSet(queries, nbr_ids, nbr_vecs, _train_rows(n_s, val_fraction))


@dataclass
class LearnableParams:
    """Search-side transform and codebook held in float64 while training."""

    a: np.ndarray  # (d, d_r)
    b: np.ndarray  # (d_r,)
    cpq: np.ndarray  # (M, 16, dsub)

    @classmethod
    def from_param_set(cls, ps: ParamSet) -> "LearnableParams":
        return cls(
            ps.transform.A.astype(np.float64),
            ps.transform.b.astype(np.float64),
            ps.pq.centroids.astype(np.float64),
        )

    def copy(self) -> "LearnableParams":
        return LearnableParams(self.a.copy(), self.b.copy(), self.cpq.copy())

    def to_param_set(self, ivf: IVFCentroids) -> ParamSet:
        return ParamSet(
            Transform(as_f32c(self.a), as_f32c(self.b)),
            ivf,
            PQCodebook(as_f32c(self.cpq)),
        )


@dataclass
class TrainConfig:
    lam: float = 0.1
    lr: float = 1e-4
    batch: int = 512
    max_epochs: int = 50
    stop_delta: float = 0.1
    seed: int = 0
    weight_decay: float = 0.01
    stop_relative: bool = False  # measure reduction relative to previous loss
    log_path: str | None = None

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _pair_scores(x: np.ndarray, vecs: np.ndarray, metric: Metric) -> np.ndarray:
    """(n, K) scores of each row's query against its K vectors, float64."""
    if metric is Metric.IP:
        return np.einsum("nd,nkd->nk", x, vecs)
    cross = np.einsum("nd,nkd->nk", x, vecs)
    return -((x * x).sum(axis=1)[:, None] - 2.0 * cross + (vecs * vecs).sum(axis=2))


@dataclass
class _Precomp:
    """Batch-independent quantities fixed for a whole training run."""

    x: np.ndarray  # (n, d) float64 queries
    reduced_nbrs: np.ndarray  # (n, K, d_r) float64, insert-side reduction
    codes: np.ndarray  # (n, K, M) int64, from the FIXED codebook
    s_o: np.ndarray  # (n, K) float64, softmax of original-space scores
    p_logp: np.ndarray  # (n,) sum of S_o log S_o terms


def precompute(
    fixed: ParamSet, queries: np.ndarray, neighbor_vecs: np.ndarray, metric: Metric
) -> _Precomp:
    x = np.asarray(queries, dtype=np.float64)
    nv = np.asarray(neighbor_vecs, dtype=np.float64)
    n, k, d = nv.shape
    a = fixed.transform.A.astype(np.float64)
    b = fixed.transform.b.astype(np.float64)
    reduced = (nv.reshape(n * k, d) @ a + b).reshape(n, k, fixed.d_r)
    codes = _encode64(fixed.pq.centroids.astype(np.float64), reduced.reshape(n * k, -1))
    s_o = _softmax(_pair_scores(x, nv, metric))
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(s_o > 0.0, s_o * np.log(s_o), 0.0).sum(axis=1)
    return _Precomp(x, reduced, codes.reshape(n, k, fixed.m), s_o, plogp)


def score_distributions(
    x: np.ndarray,
    neighbor_vecs: np.ndarray,
    fixed: ParamSet,
    learn: LearnableParams,
    metric: Metric,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The three softmax distributions for one query; mostly for inspection."""
    if neighbor_vecs.shape[0] < 2:
        raise ValueError("need K >= 2 neighbors")
    pre = precompute(fixed, np.asarray(x)[None, :], neighbor_vecs[None], metric)
    rx = pre.x @ learn.a + learn.b
    s_r = _softmax(_pair_scores(rx, pre.reduced_nbrs, metric))
    q = _gather_codewords(learn.cpq, pre.codes)
    s_q = _softmax(_pair_scores(rx, q, metric))
    return pre.s_o[0], s_r[0], s_q[0]


def _gather_codewords(cpq: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Reconstruction vectors (n, K, d_r) for the given code indices."""
    n, k, m = codes.shape
    dsub = cpq.shape[2]
    flat = np.empty((n * k, m, dsub))
    cflat = codes.reshape(n * k, m)
    for j in range(m):
        flat[:, j, :] = cpq[j, cflat[:, j]]
    return flat.reshape(n, k, m * dsub)


def _kl_sum(s_o: np.ndarray, p_logp: np.ndarray, log_s: np.ndarray) -> float:
    """Sum over rows of KL(S_o || S), using precomputed sum of p log p."""
    cross = np.where(s_o > 0.0, s_o * log_s, 0.0).sum(axis=1)
    return float((p_logp - cross).sum())


def loss_and_grads(
    pre: _Precomp,
    rows: np.ndarray,
    learn: LearnableParams,
    lam: float,
    metric: Metric,
    want_grads: bool = True,
) -> tuple[float, LearnableParams | None]:
    """Objective over the selected rows, optionally with analytic gradients."""
    x = pre.x[rows]
    r = pre.reduced_nbrs[rows]
    codes = pre.codes[rows]
    s_o = pre.s_o[rows]
    p_logp = pre.p_logp[rows]
    rx = x @ learn.a + learn.b
    q = _gather_codewords(learn.cpq, codes)
    scores_r = _pair_scores(rx, r, metric)
    scores_q = _pair_scores(rx, q, metric)
    total = _kl_sum(s_o, p_logp, _log_softmax(scores_r))
    if lam != 0.0:
        total += lam * _kl_sum(s_o, p_logp, _log_softmax(scores_q))
    if not want_grads:
        return total, None
    g_r = _softmax(scores_r) - s_o
    g_q = lam * (_softmax(scores_q) - s_o)
    if metric is Metric.IP:
        d_rx = np.einsum("nk,nkd->nd", g_r, r) + np.einsum("nk,nkd->nd", g_q, q)
        d_q = g_q[:, :, None] * rx[:, None, :]
    else:
        weight = (g_r + g_q).sum(axis=1)
        pulled = np.einsum("nk,nkd->nd", g_r, r) + np.einsum("nk,nkd->nd", g_q, q)
        d_rx = -2.0 * (weight[:, None] * rx - pulled)
        d_q = g_q[:, :, None] * (2.0 * (rx[:, None, :] - q))
    grads = LearnableParams(
        x.T @ d_rx, d_rx.sum(axis=0), np.zeros_like(learn.cpq)
    )
    m, dsub = learn.cpq.shape[0], learn.cpq.shape[2]
    dq_flat = d_q.reshape(-1, m, dsub)
    cflat = codes.reshape(-1, m)
    for j in range(m):
        np.add.at(grads.cpq[j], cflat[:, j], dq_flat[:, j, :])
    return total, grads


def loss(
    queries: np.ndarray,
    neighbor_vecs: np.ndarray,
    fixed: ParamSet,
    learn: LearnableParams,
    lam: float,
    metric: Metric,
) -> float:
    """Objective over one explicit batch; convenience wrapper for tests."""
    pre = precompute(fixed, queries, neighbor_vecs, metric)
    value, _ = loss_and_grads(
        pre, np.arange(queries.shape[0]), learn, lam, metric, want_grads=False
    )
    return value


def gradients(
    queries: np.ndarray,
    neighbor_vecs: np.ndarray,
    fixed: ParamSet,
    learn: LearnableParams,
    lam: float,
    metric: Metric,
) -> LearnableParams:
    pre = precompute(fixed, queries, neighbor_vecs, metric)
    _, grads = loss_and_grads(pre, np.arange(queries.shape[0]), learn, lam, metric)
    assert grads is not None
    return grads


class _AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay."""

    def __init__(self, lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr = lr
        self.wd = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: LearnableParams, grads: LearnableParams) -> None:
        self.t += 1
        for name in ("a", "b", "cpq"):
            p = getattr(params, name)
            g = getattr(grads, name)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            p -= self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.wd * p)


@dataclass
class TrainResult:
    params: LearnableParams
    val_losses: list[float] = field(default_factory=list)  # index 0 = before training
    train_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    epochs_run: int = 0


def _val_loss(pre: _Precomp, rows: np.ndarray, learn: LearnableParams,
              lam: float, metric: Metric, batch: int) -> float:
    total = 0.0
    for start in range(0, rows.shape[0], batch):
        value, _ = loss_and_grads(
            pre, rows[start : start + batch], learn, lam, metric, want_grads=False
        )
        total += value
    return total


def train(ts: TrainingSet, init: ParamSet, cfg: TrainConfig, metric: Metric) -> TrainResult:
    """Mini-batch optimization; returns the best-validation-epoch parameters."""
    pre = precompute(init, ts.queries, ts.neighbor_vecs, metric)
    train_rows = np.arange(ts.n_train)
    val_rows = np.arange(ts.n_train, ts.n_s)
    learn = LearnableParams.from_param_set(init)
    opt = _AdamW(cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(learn.copy())
    prev_val = _val_loss(pre, val_rows, learn, cfg.lam, metric, cfg.batch)
    result.val_losses.append(prev_val)
    best_val = prev_val
    log_rows: list[list] = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(train_rows)
        epoch_loss = 0.0
        for start in range(0, order.shape[0], cfg.batch):
            value, grads = loss_and_grads(
                pre, order[start : start + cfg.batch], learn, cfg.lam, metric
            )
            if not np.isfinite(value):
                raise DivergenceError(epoch)
            epoch_loss += value
            assert grads is not None
            opt.step(learn, grads)
        val = _val_loss(pre, val_rows, learn, cfg.lam, metric, cfg.batch)
        if not np.isfinite(val):
            raise DivergenceError(epoch)
        result.train_losses.append(epoch_loss)
        result.val_losses.append(val)
        result.epochs_run = epoch
        log_rows.append([epoch, epoch_loss, val, cfg.lr, cfg.lam])
        if val < best_val:
            best_val = val
            result.params = learn.copy()
            result.best_epoch = epoch
        reduction = prev_val - val
        if cfg.stop_relative and prev_val > 0:
            reduction /= prev_val
        prev_val = val
        if reduction < cfg.stop_delta:
            break
    if cfg.log_path:
        with open(cfg.log_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr", "lambda"])
            writer.writerows(log_rows)
    return result


def recompute_ivf_centroids(
    sample: Dataset | np.ndarray,
    insert_params: ParamSet,
    learn: LearnableParams,
    metric: Metric,
) -> IVFCentroids:
    """Search-side centroids: group with insert params, average learned reductions.

    Partitions that receive no sample keep their insert-side centroid row
    unchanged.
    """
    vectors = sample.vectors if isinstance(sample, Dataset) else as_f32c(sample)
    x_r = insert_params.transform.apply(vectors)
    pids = assign_rows(x_r, insert_params.ivf.f32, metric)
    y = vectors.astype(np.float64) @ learn.a + learn.b
    n_c = insert_params.n_partitions
    rows = insert_params.ivf.f32.astype(np.float64).copy()
    counts = np.bincount(pids, minlength=n_c)
    sums = np.zeros((n_c, y.shape[1]))
    np.add.at(sums, pids, y)
    live = counts > 0
    rows[live] = sums[live] / counts[live, None]
    return IVFCentroids.from_f32(as_f32c(rows))
