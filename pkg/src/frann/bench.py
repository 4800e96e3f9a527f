"""Measurement harness: dataset IO, ground truth, sweeps, read-write mixes.

Ground truth is exhaustive float64 scoring with the same tie rule as the
index, so lossless configurations can be compared for exact equality.
The read-write runner drives independent client loops against a target
(in-process index or remote cluster) and audits the outcome afterwards:
acknowledged inserts must be findable, tombstoned ids must not appear in
any search that started after the delete was acknowledged.
"""

from __future__ import annotations

import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, Metric, normalize_rows, similarity, top_k_desc
from .index import FilterRefineIndex, SearchConfig

# ------------------------------------------------------------------ file IO


def read_fvecs(path: str) -> np.ndarray:
    raw = np.fromfile(path, dtype="<i4")
    if raw.size == 0:
        return np.zeros((0, 0), dtype=np.float32)
    d = int(raw[0])
    if d <= 0 or raw.size % (d + 1):
        raise ValueError(f"truncated or malformed fvecs file {path!r}")
    rows = raw.reshape(-1, d + 1)
    if not (rows[:, 0] == d).all():
        raise ValueError(f"inconsistent dims in {path!r}")
    return rows[:, 1:].copy().view("<f4").astype(np.float32)


def write_fvecs(path: str, mat: np.ndarray) -> None:
    mat = np.ascontiguousarray(np.atleast_2d(mat), dtype="<f4")
    n, d = mat.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = mat.view("<i4")
    out.tofile(path)


def read_ivecs(path: str) -> np.ndarray:
    raw = np.fromfile(path, dtype="<i4")
    if raw.size == 0:
        return np.zeros((0, 0), dtype=np.int32)
    d = int(raw[0])
    if d <= 0 or raw.size % (d + 1):
        raise ValueError(f"truncated or malformed ivecs file {path!r}")
    rows = raw.reshape(-1, d + 1)
    if not (rows[:, 0] == d).all():
        raise ValueError(f"inconsistent dims in {path!r}")
    return rows[:, 1:].copy()


def read_bvecs(path: str) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.zeros((0, 0), dtype=np.float32)
    d = int(np.frombuffer(raw[:4].tobytes(), dtype="<i4")[0])
    if d <= 0 or raw.size % (d + 4):
        raise ValueError(f"truncated or malformed bvecs file {path!r}")
    rows = raw.reshape(-1, d + 4)
    dims = rows[:, :4].copy().view("<i4").reshape(-1)
    if not (dims == d).all():
        raise ValueError(f"inconsistent dims in {path!r}")
    return rows[:, 4:].astype(np.float32)


def read_raw_f32(path: str, d: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if d <= 0 or raw.size % d:
        raise ValueError(f"file size not a multiple of dim {d}")
    return raw.reshape(-1, d).astype(np.float32)


def ingest(path: str, fmt: str, d: int | None = None, normalize: bool = False) -> Dataset:
    """Load a vector file; ids are assigned 0..N-1."""
    if fmt == "fvecs":
        mat = read_fvecs(path)
    elif fmt == "bvecs":
        mat = read_bvecs(path)
    elif fmt == "ivecs":
        mat = read_ivecs(path).astype(np.float32)
    elif fmt == "raw_f32":
        if d is None:
            raise ValueError("raw_f32 needs an explicit dim")
        mat = read_raw_f32(path, d)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if normalize:
        mat = normalize_rows(mat)
    return Dataset(mat)


# ----------------------------------------------------------- synthetic data


def synth(
    n: int,
    d: int,
    n_clusters: int,
    std: float = 0.1,
    seed: int = 0,
    center_seed: int | None = None,
) -> Dataset:
    """Gaussian-mixture sample: unit-normal centers plus per-point noise.

    center_seed keeps the mixture fixed while varying the point sample, so
    query sets can be drawn from the same distribution as the data.
    """
    c_rng = np.random.default_rng(seed if center_seed is None else center_seed)
    centers = c_rng.normal(0.0, 1.0, size=(n_clusters, d))
    p_rng = np.random.default_rng(seed)
    labels = p_rng.integers(n_clusters, size=n)
    points = centers[labels] + p_rng.normal(0.0, std, size=(n, d))
    return Dataset(points.astype(np.float32))


# ------------------------------------------------------------- ground truth


@dataclass
class GroundTruth:
    ids: np.ndarray  # (nq, k) int64
    scores: np.ndarray  # (nq, k) float64

    @property
    def k(self) -> int:
        return self.ids.shape[1]

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(struct.pack("<II", self.ids.shape[0], self.ids.shape[1]))
            f.write(self.ids.astype("<i8").tobytes())
            f.write(self.scores.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "GroundTruth":
        with open(path, "rb") as f:
            buf = f.read()
        nq, k = struct.unpack_from("<II", buf, 0)
        ids = np.frombuffer(buf, dtype="<i8", count=nq * k, offset=8)
        scores = np.frombuffer(buf, dtype="<f8", count=nq * k, offset=8 + 8 * nq * k)
        return cls(ids.astype(np.int64).reshape(nq, k), scores.astype(np.float64).reshape(nq, k))


def ground_truth(data: Dataset, queries: np.ndarray, k: int, metric: Metric) -> GroundTruth:
    """Exhaustive exact top-k per query, same scoring path as the refine stage."""
    queries = np.atleast_2d(queries)
    k = min(k, data.n)
    ids = np.empty((queries.shape[0], k), dtype=np.int64)
    scores = np.empty((queries.shape[0], k), dtype=np.float64)
    for row, q in enumerate(queries):
        s = similarity(data.vectors, np.asarray(q, dtype=np.float32), metric, np.float64)
        scores[row], ids[row] = top_k_desc(s, data.ids, k)
    return GroundTruth(ids, scores)


def recall_at(result_ids, gt: GroundTruth, k: int) -> float:
    """Mean over queries of |top-k results cap top-k truth| / k."""
    total = 0.0
    for row, res in enumerate(result_ids):
        truth = set(int(v) for v in gt.ids[row, :k])
        got = set(int(v) for v in np.asarray(res).reshape(-1)[:k])
        total += len(truth & got) / k
    return total / max(1, len(result_ids))


# ------------------------------------------------------------------- sweeps


def _search_ids(target, x: np.ndarray, cfg: SearchConfig) -> np.ndarray:
    return target.search(x, cfg).ids


def sweep(
    target,
    queries: np.ndarray,
    gt: GroundTruth,
    configs: list[SearchConfig],
    clients: int = 1,
    warmup: int = 100,
) -> list[dict]:
    """Measure each config: recall over all queries, QPS/latency after warmup."""
    queries = np.atleast_2d(queries)
    nq = queries.shape[0]
    rows = []
    for cfg in configs:
        for q in queries[: min(warmup, nq)]:
            _search_ids(target, q, cfg)
        results: list[np.ndarray | None] = [None] * nq
        latencies = np.zeros(nq)

        def run_slice(start: int, step: int, cfg=cfg) -> None:
            for qi in range(start, nq, step):
                t0 = time.monotonic()
                results[qi] = _search_ids(target, queries[qi], cfg)
                latencies[qi] = time.monotonic() - t0

        wall0 = time.monotonic()
        if clients <= 1:
            run_slice(0, 1)
        else:
            threads = [
                threading.Thread(target=run_slice, args=(c, clients)) for c in range(clients)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        wall = time.monotonic() - wall0
        rows.append(
            {
                "nprobe": cfg.nprobe,
                "k": cfg.k,
                "k_factor": cfg.k_factor,
                "et_enabled": int(cfg.et_enabled),
                "et_t": cfg.threshold() if cfg.et_enabled else 0.0,
                "et_nt": cfg.et_nt,
                "ivf_q8": int(cfg.ivf_q8),
                "recall": recall_at(results, gt, cfg.k),
                "qps": nq / wall if wall > 0 else float("inf"),
                "p50_ms": float(np.percentile(latencies, 50) * 1e3),
                "p99_ms": float(np.percentile(latencies, 99) * 1e3),
            }
        )
    return rows


def write_csv(path: str, rows: list[dict]) -> None:
    import csv

    if not rows:
        with open(path, "w", newline="") as f:
            f.write("")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


# ------------------------------------------------------- read-write workload


@dataclass
class WorkloadSpec:
    """Mixed workload shape; ratios over ops, writes split insert/delete."""

    read_ratio: float = 0.8
    insert_weight: float = 0.5
    delete_weight: float = 0.5
    clients: int = 32
    duration_s: float = 10.0
    search_cfg: SearchConfig = field(default_factory=SearchConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.read_ratio <= 1.0:
            raise ValueError("read_ratio must be in [0, 1]")
        w = self.insert_weight + self.delete_weight
        if w <= 0:
            raise ValueError("write weights must sum > 0")
        self.insert_weight /= w
        self.delete_weight /= w


@dataclass
class _ClientLog:
    searches: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    # (query idx, start ns, result ids)
    inserts: list[tuple[int, int, int]] = field(default_factory=list)  # (id, vec idx, ack ns)
    deletes: list[tuple[int, int]] = field(default_factory=list)  # (id, ack ns)
    errors: list[str] = field(default_factory=list)
    ops: int = 0


class _LocalTarget:
    """Adapter so the workload runner treats index and cluster alike."""

    def __init__(self, index: FilterRefineIndex) -> None:
        self.index = index

    def search(self, x, cfg):
        return self.index.search(x, cfg)

    def insert(self, vid, vector):
        self.index.insert([vid], vector[None, :])

    def delete(self, ids):
        self.index.delete(ids)

    def exhaustive_ids(self, x) -> set[int]:
        n = max(1, int(self.index.partitions.lens().sum()))
        cfg = SearchConfig(k=n, k_factor=1, nprobe=self.index.insert_params.n_partitions)
        ids, _, _ = self.index.filter_stage(x, cfg)
        return {int(v) for v in ids}


class _ClusterTarget:
    def __init__(self, client) -> None:
        self.client = client

    def search(self, x, cfg):
        return self.client.search(x, cfg)

    def insert(self, vid, vector):
        self.client.insert(vid, vector)

    def delete(self, ids):
        self.client.delete(ids)

    def exhaustive_ids(self, x) -> set[int]:
        total = 0
        for stats in self.client.stats().values():
            if stats.get("role") == "index":
                total = max(total, int(stats.get("n_encoded", 0)))
        cfg = SearchConfig(k=max(1, total), k_factor=1, nprobe=10**9)
        found = self.client.search(x, cfg)
        return {int(v) for v in found.ids}


@dataclass
class RWReport:
    qps: float
    n_searches: int
    n_inserts: int
    n_deletes: int
    n_errors: int
    error_samples: list[str]
    lost_inserts: int
    tombstone_violations: int
    recall: float

    def as_dict(self) -> dict:
        return {
            "qps": self.qps,
            "n_searches": self.n_searches,
            "n_inserts": self.n_inserts,
            "n_deletes": self.n_deletes,
            "n_errors": self.n_errors,
            "lost_inserts": self.lost_inserts,
            "tombstone_violations": self.tombstone_violations,
            "recall": self.recall,
        }


def run_readwrite(
    target,
    spec: WorkloadSpec,
    query_pool: np.ndarray,
    insert_pool: np.ndarray,
    id_start: int,
    live_lookup=None,
    metric: Metric = Metric.IP,
) -> RWReport:
    """Drive `clients` loops for duration_s, then audit the recorded log.

    insert_pool rows are consumed by a shared counter so every insert uses
    a unique id; each loop only deletes ids it inserted itself, keeping the
    loops free of shared mutable state beyond the counter.
    """
    if isinstance(target, FilterRefineIndex):
        target = _LocalTarget(target)
    query_pool = np.atleast_2d(query_pool)
    insert_pool = np.atleast_2d(insert_pool)
    counter = {"next": 0}
    counter_lock = threading.Lock()
    logs = [_ClientLog() for _ in range(spec.clients)]
    stop_at = time.monotonic() + spec.duration_s

    def take_insert_slot() -> int | None:
        with counter_lock:
            slot = counter["next"]
            if slot >= insert_pool.shape[0]:
                return None
            counter["next"] = slot + 1
            return slot

    def client_loop(ci: int) -> None:
        rng = np.random.default_rng(spec.seed * 1000 + ci)
        log = logs[ci]
        my_live: list[int] = []
        while time.monotonic() < stop_at:
            log.ops += 1
            try:
                if rng.random() < spec.read_ratio or spec.read_ratio == 1.0:
                    qi = int(rng.integers(query_pool.shape[0]))
                    t0 = time.monotonic_ns()
                    res = target.search(query_pool[qi], spec.search_cfg)
                    log.searches.append((qi, t0, np.asarray(res.ids, dtype=np.int64)))
                elif rng.random() < spec.insert_weight or not my_live:
                    slot = take_insert_slot()
                    if slot is None:
                        continue
                    vid = id_start + slot
                    target.insert(vid, insert_pool[slot])
                    log.inserts.append((vid, slot, time.monotonic_ns()))
                    my_live.append(vid)
                else:
                    vid = my_live.pop(int(rng.integers(len(my_live))))
                    target.delete([vid])
                    log.deletes.append((vid, time.monotonic_ns()))
            except Exception as exc:  # keep the loop alive, record the failure
                log.errors.append(f"client {ci}: {type(exc).__name__}: {exc}")

    threads = [threading.Thread(target=client_loop, args=(ci,)) for ci in range(spec.clients)]
    wall0 = time.monotonic()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    wall = time.monotonic() - wall0

    n_searches = sum(len(l.searches) for l in logs)
    n_inserts = sum(len(l.inserts) for l in logs)
    n_deletes = sum(len(l.deletes) for l in logs)
    errors = [e for l in logs for e in l.errors]

    # audit 1: every acknowledged insert that was never deleted is findable
    deleted_ids = {vid for l in logs for vid, _ in l.deletes}
    lost = 0
    for l in logs:
        for vid, slot, _ in l.inserts:
            if vid in deleted_ids:
                continue
            if vid not in target.exhaustive_ids(insert_pool[slot]):
                lost += 1
    # audit 2: no search that began after a delete ack returned that id
    ack_of: dict[int, int] = {}
    for l in logs:
        for vid, ack in l.deletes:
            ack_of[vid] = min(ack, ack_of.get(vid, ack))
    violations = 0
    for l in logs:
        for _, start_ns, ids in l.searches:
            for vid in ids:
                ack = ack_of.get(int(vid))
                if ack is not None and ack < start_ns:
                    violations += 1
    # post-hoc recall against the end-state ground truth
    recall = float("nan")
    if n_searches and live_lookup is not None:
        live_data = live_lookup()
        gt = ground_truth(live_data, query_pool, spec.search_cfg.k, metric)
        per_query: dict[int, list[np.ndarray]] = {}
        for l in logs:
            for qi, _, ids in l.searches:
                per_query.setdefault(qi, []).append(ids)
        total, count = 0.0, 0
        for qi, results in per_query.items():
            truth = set(int(v) for v in gt.ids[qi])
            for ids in results:
                got = set(int(v) for v in ids[: spec.search_cfg.k])
                total += len(truth & got) / spec.search_cfg.k
                count += 1
        recall = total / count if count else float("nan")
    total_ops = n_searches + n_inserts + n_deletes
    return RWReport(
        qps=total_ops / wall if wall > 0 else float("inf"),
        n_searches=n_searches,
        n_inserts=n_inserts,
        n_deletes=n_deletes,
        n_errors=len(errors),
        error_samples=errors[:5],
        lost_inserts=lost,
        tombstone_violations=violations,
        recall=recall,
    )
