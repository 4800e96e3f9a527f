"""The two-stage index: filter over compressed codes, refine on full vectors.

A search reduces the query, ranks partitions, scans the best ones over
4-bit codes via a lookup table, then rescores the surviving candidates
against their original full-precision vectors. Two parameter sets coexist:
the insert side is fixed at build time so stored codes stay valid, while
the search side can be swapped in atomically after offline training.
"""

from __future__ import annotations

import json
import os
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from .clustering import KMeansConfig, kmeans, sample_rows
from .core import Dataset, Metric, Transform, as_f32c, similarity, top_k_desc
from .ivf import (
    IVFCentroids,
    PartitionSet,
    TopKCollector,
    _tombstone_mask,
    assign_rows,
    deserialize_partitions,
    rank_partitions,
    scan_partition,
    serialize_partitions,
)
from .pq import (
    PQCodebook,
    codebook_from_bytes,
    codebook_to_bytes,
    compute_lut,
    opq_init,
    pq_encode,
    quantize_lut,
)

PARAMS_MAGIC = b"HKPS1"
CHECKPOINT_VERSION = 1


@dataclass
class ParamSet:
    """One complete set of index parameters: transform, centroids, codebook."""

    transform: Transform
    ivf: IVFCentroids
    pq: PQCodebook

    def __post_init__(self) -> None:
        if not (self.transform.dim_out == self.ivf.dim == self.pq.dim):
            raise ValueError(
                f"reduced dims disagree: transform {self.transform.dim_out}, "
                f"ivf {self.ivf.dim}, pq {self.pq.dim}"
            )

    @property
    def d(self) -> int:
        return self.transform.dim_in

    @property
    def d_r(self) -> int:
        return self.transform.dim_out

    @property
    def m(self) -> int:
        return self.pq.m

    @property
    def n_partitions(self) -> int:
        return self.ivf.n_partitions

    def copy(self) -> "ParamSet":
        ivf = IVFCentroids(
            self.ivf.f32.copy(), self.ivf.q8.copy(), self.ivf.scale.copy(), self.ivf.offset.copy()
        )
        return ParamSet(self.transform.copy(), ivf, self.pq.copy())

    def compatible_with(self, other: "ParamSet") -> bool:
        return (
            self.d == other.d
            and self.d_r == other.d_r
            and self.m == other.m
            and self.n_partitions == other.n_partitions
        )

    def to_bytes(self) -> bytes:
        head = PARAMS_MAGIC + struct.pack(
            "<III", self.d, self.d_r, self.ivf.n_partitions
        )
        return b"".join(
            [
                head,
                self.transform.A.astype("<f4").tobytes(),
                self.transform.b.astype("<f4").tobytes(),
                self.ivf.f32.astype("<f4").tobytes(),
                codebook_to_bytes(self.pq),
            ]
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParamSet":
        if buf[:5] != PARAMS_MAGIC:
            raise ValueError("bad parameter-set magic")
        d, d_r, n_c = struct.unpack_from("<III", buf, 5)
        off = 17
        a = np.frombuffer(buf, dtype="<f4", count=d * d_r, offset=off).reshape(d, d_r)
        off += 4 * d * d_r
        b = np.frombuffer(buf, dtype="<f4", count=d_r, offset=off)
        off += 4 * d_r
        cents = np.frombuffer(buf, dtype="<f4", count=n_c * d_r, offset=off).reshape(n_c, d_r)
        off += 4 * n_c * d_r
        cb = codebook_from_bytes(buf[off:])
        return cls(Transform(a.copy(), b.copy()), IVFCentroids.from_f32(cents), cb)


class FullVectorStore:
    """Id-addressable original vectors, used by the refine stage."""

    def __init__(self, dim: int) -> None:
        self.dim = dim
        self._rows: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._rows)

    def __contains__(self, vid: int) -> bool:
        return int(vid) in self._rows

    def add(self, ids: np.ndarray, vectors: np.ndarray) -> None:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        vectors = as_f32c(np.atleast_2d(vectors))
        if vectors.shape != (ids.shape[0], self.dim):
            raise ValueError(f"expected ({ids.shape[0]}, {self.dim}), got {vectors.shape}")
        with self._lock:
            for i, vid in enumerate(ids):
                key = int(vid)
                if key in self._rows:
                    raise ValueError(f"duplicate id {key}")
                self._rows[key] = vectors[i].copy()

    def get(self, vid: int) -> np.ndarray:
        return self._rows[int(vid)]

    def score(
        self, x: np.ndarray, ids: np.ndarray, metric: Metric
    ) -> tuple[np.ndarray, np.ndarray, list[int]]:
        """Exact float64 scores for the resolvable ids, plus the missing ones.

        Per-row scoring, so any subset of candidates gets the same score for
        a given id; distributed refine shards therefore agree with a local
        rescoring bit for bit.
        """
        found: list[int] = []
        rows: list[np.ndarray] = []
        missing: list[int] = []
        for vid in np.atleast_1d(np.asarray(ids, dtype=np.int64)):
            row = self._rows.get(int(vid))
            if row is None:
                missing.append(int(vid))
            else:
                found.append(int(vid))
                rows.append(row)
        if not found:
            return np.zeros(0, dtype=np.int64), np.zeros(0), missing
        mat = np.stack(rows)
        scores = similarity(mat, as_f32c(x), metric, out_dtype=np.float64)
        return np.asarray(found, dtype=np.int64), scores, missing

    def ids_sorted(self) -> np.ndarray:
        with self._lock:
            return np.array(sorted(self._rows), dtype=np.int64)

    def to_bytes(self, ids: np.ndarray | None = None) -> bytes:
        """Rows as [id:u64][d f32s], sorted by id."""
        if ids is None:
            ids = self.ids_sorted()
        chunks = []
        for vid in ids:
            chunks.append(struct.pack("<Q", int(vid)))
            chunks.append(self._rows[int(vid)].astype("<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, buf: bytes, dim: int) -> "FullVectorStore":
        store = cls(dim)
        stride = 8 + 4 * dim
        if len(buf) % stride:
            raise ValueError("truncated full-vector file")
        for off in range(0, len(buf), stride):
            (vid,) = struct.unpack_from("<Q", buf, off)
            row = np.frombuffer(buf, dtype="<f4", count=dim, offset=off + 8)
            store._rows[int(vid)] = row.copy()
        return store


@dataclass
class SearchConfig:
    """Knobs for one search; k' = k * k_factor candidates leave the filter."""

    k: int = 10
    k_factor: int = 10
    nprobe: int = 1
    et_enabled: bool = False
    et_t: float | None = None  # None: k' / 200
    et_nt: int = 10
    ivf_q8: bool = False
    lut_q8: bool = False

    def __post_init__(self) -> None:
        if self.k < 1 or self.k_factor < 1 or self.nprobe < 1:
            raise ValueError("k, k_factor and nprobe must be >= 1")

    @property
    def k_prime(self) -> int:
        return self.k * self.k_factor

    def threshold(self) -> float:
        return self.k_prime / 200.0 if self.et_t is None else self.et_t


@dataclass
class SearchStats:
    partitions_scanned: int = 0
    n_candidates: int = 0


@dataclass
class SearchResult:
    ids: np.ndarray  # (<=k,) int64
    scores: np.ndarray  # (<=k,) float64 exact scores
    stats: SearchStats = field(default_factory=SearchStats)


class EarlyTermination:
    """Counts consecutive partitions that contributed fewer than t vectors."""

    def __init__(self, t: float, n_t: float) -> None:
        self.t = t
        self.n_t = n_t
        self.counter = 0

    def update(self, n_added: int) -> bool:
        """Feed one partition's n_added; True means stop scanning."""
        self.counter = self.counter + 1 if n_added < self.t else 0
        return self.counter > self.n_t


def memory_report(d: int, d_r: int, n_c: int, n: int, dsub: int) -> dict[str, float]:
    """Byte counts for every index component at the given shape."""
    m = d_r // dsub
    if m * dsub != d_r:
        raise ValueError("d_r must be divisible by dsub")
    nibbles = n * m
    rep = {
        "transform_bytes": 2 * 4 * d * d_r + 4 * d_r,
        "ivf_bytes": n_c * 4 * d_r + n_c * d_r,
        "pq_bytes": 2 * 16 * 4 * d_r,
        "codes_bytes": nibbles // 2 if nibbles % 2 == 0 else nibbles / 2,
        "full_bytes": n * 4 * d,
    }
    rep["filter_total_bytes"] = (
        rep["transform_bytes"] + rep["ivf_bytes"] + rep["pq_bytes"] + rep["codes_bytes"]
    )
    return rep


class FilterRefineIndex:
    """Two-stage index with decoupled insert-side and search-side parameters."""

    def __init__(self, insert_params: ParamSet, metric: Metric) -> None:
        self.metric = metric
        self.insert_params = insert_params
        self.search_params = insert_params  # alias until first install
        self.partitions = PartitionSet(insert_params.n_partitions, insert_params.m)
        self.full = FullVectorStore(insert_params.d)
        self.id_to_pid: dict[int, int] = {}
        self._known_ids: set[int] = set()
        self._reserve_lock = threading.Lock()

    # ------------------------------------------------------------ build

    @classmethod
    def build_base(
        cls,
        data: Dataset,
        n_partitions: int,
        d_r: int,
        m: int,
        metric: Metric = Metric.IP,
        seed: int = 0,
        train_sample: int = 100_000,
        opq_iters: int = 8,
        kmeans_iters: int = 25,
    ) -> "FilterRefineIndex":
        """Train transform, centroids and codebook on a sample, then bulk load."""
        if n_partitions > data.n:
            raise ValueError("more partitions than vectors")
        if d_r % m:
            raise ValueError("d_r must be divisible by M")
        rng = np.random.default_rng(seed)
        sample = data.vectors[np.sort(sample_rows(data.n, train_sample, rng))]
        transform, codebook, _ = opq_init(sample, d_r, m, seed=seed)
        reduced = transform.apply(sample)
        km = kmeans(reduced, KMeansConfig(n_partitions, max_iters=kmeans_iters, seed=seed))
        params = ParamSet(transform, IVFCentroids.from_f32(km.centroids), codebook)
        index = cls(params, metric)
        index.insert(data.ids, data.vectors)
        return index

    # ----------------------------------------------------------- search

    def filter_stage(
        self, x: np.ndarray, cfg: SearchConfig
    ) -> tuple[np.ndarray, np.ndarray, SearchStats]:
        """Candidate ids with approximate scores, best first."""
        sp = self.search_params  # pin one parameter snapshot for this search
        x = as_f32c(np.asarray(x).reshape(-1))
        if x.shape[0] != sp.d:
            raise ValueError(f"query dim {x.shape[0]}, index dim {sp.d}")
        return self._filter_reduced(sp, sp.transform.apply(x), cfg)

    def _filter_reduced(
        self, sp: ParamSet, x_r: np.ndarray, cfg: SearchConfig
    ) -> tuple[np.ndarray, np.ndarray, SearchStats]:
        """Filter with the reduction already applied (shared by batch paths)."""
        pids, _ = rank_partitions(x_r, sp.ivf, self.metric, use_q8=cfg.ivf_q8)
        lut = compute_lut(sp.pq, x_r, self.metric)
        qlut = quantize_lut(lut) if cfg.lut_q8 else None
        ts_sorted = self.partitions.tombstone_snapshot()
        collector = TopKCollector(cfg.k_prime)
        et = EarlyTermination(cfg.threshold(), cfg.et_nt)
        cap = min(cfg.nprobe, sp.n_partitions)
        stats = SearchStats()
        for pid in pids[:cap]:
            n_added = scan_partition(
                self.partitions.partitions[pid], lut, ts_sorted, collector, qlut=qlut
            )
            stats.partitions_scanned += 1
            if cfg.et_enabled and et.update(n_added):
                break
        scores, ids = collector.items()
        stats.n_candidates = ids.shape[0]
        return ids, scores, stats

    def refine_stage(
        self, x: np.ndarray, candidate_ids: np.ndarray, k: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Rescore candidates on full vectors; returns (ids, exact scores)."""
        x = as_f32c(np.asarray(x).reshape(-1))
        found, scores, missing = self.full.score(x, candidate_ids, self.metric)
        if missing:
            raise KeyError(f"candidate ids missing from the full store: {missing[:5]}")
        top_scores, top_ids = top_k_desc(scores, found, k)
        return top_ids, top_scores

    def search(self, x: np.ndarray, cfg: SearchConfig) -> SearchResult:
        ids, _, stats = self.filter_stage(x, cfg)
        if ids.size == 0:
            return SearchResult(np.zeros(0, dtype=np.int64), np.zeros(0), stats)
        top_ids, top_scores = self.refine_stage(x, ids, cfg.k)
        return SearchResult(top_ids, top_scores, stats)

    # ----------------------------------------------------------- writes

    def insert(self, ids, vectors) -> np.ndarray:
        """Add vectors; returns the partition id of each.

        Encoding and partition assignment always use the insert-side
        parameters, so codes stay comparable across parameter installs.
        """
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        vectors = as_f32c(np.atleast_2d(vectors))
        if ids.shape[0] != vectors.shape[0]:
            raise ValueError("ids and vectors length mismatch")
        if not np.isfinite(vectors).all():
            raise ValueError("vectors contain non-finite values")
        ip = self.insert_params
        with self._reserve_lock:
            fresh = [int(v) for v in ids]
            if len(set(fresh)) != len(fresh):
                raise ValueError("duplicate ids within the batch")
            clash = [v for v in fresh if v in self._known_ids]
            if clash:
                raise ValueError(f"duplicate id {clash[0]}")
            self._known_ids.update(fresh)
        x_r = ip.transform.apply(vectors)
        codes = pq_encode(ip.pq, x_r)
        pids = assign_rows(x_r, ip.ivf.f32, self.metric)
        # full vectors first: anything visible in a partition must refine
        self.full.add(ids, vectors)
        self._append_encoded(ids, pids, codes)
        return pids

    def encode_for_insert(self, vectors) -> tuple[np.ndarray, np.ndarray]:
        """(pids, codes) a vector batch would get, without mutating anything."""
        vectors = as_f32c(np.atleast_2d(vectors))
        if vectors.shape[1] != self.insert_params.d:
            raise ValueError(f"vector dim {vectors.shape[1]}, index dim {self.insert_params.d}")
        if not np.isfinite(vectors).all():
            raise ValueError("vectors contain non-finite values")
        ip = self.insert_params
        x_r = ip.transform.apply(vectors)
        return assign_rows(x_r, ip.ivf.f32, self.metric), pq_encode(ip.pq, x_r)

    def insert_encoded(self, ids, pids, codes) -> None:
        """Apply precomputed (pid, code) rows; used by replicas that never
        hold full vectors."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        pids = np.atleast_1d(np.asarray(pids, dtype=np.int64))
        codes = np.atleast_2d(np.asarray(codes, dtype=np.uint8))
        with self._reserve_lock:
            clash = [int(v) for v in ids if int(v) in self._known_ids]
            if clash:
                raise ValueError(f"duplicate id {clash[0]}")
            self._known_ids.update(int(v) for v in ids)
        self._append_encoded(ids, pids, codes)

    def _append_encoded(self, ids: np.ndarray, pids: np.ndarray, codes: np.ndarray) -> None:
        for i, vid in enumerate(ids):
            self.id_to_pid[int(vid)] = int(pids[i])
        for pid in np.unique(pids):
            sel = pids == pid
            self.partitions.append(int(pid), ids[sel], codes[sel])

    def delete(self, ids) -> None:
        """Tombstone ids; idempotent, unknown ids ignored."""
        self.partitions.delete(ids)

    def has_id(self, vid: int) -> bool:
        return int(vid) in self._known_ids

    def install_search_params(self, params: ParamSet) -> None:
        """Atomically swap the search-side parameters."""
        if not params.compatible_with(self.insert_params):
            raise ValueError("incompatible parameter dimensions")
        self.search_params = params  # single reference store: atomic for readers

    # ------------------------------------------------------ persistence

    def checkpoint(self, path: str) -> None:
        """Write a compacted copy: tombstoned rows are dropped from the files."""
        os.makedirs(path, exist_ok=True)
        ts = self.partitions.tombstone_snapshot()
        chunks = []
        for part in self.partitions.partitions:
            ids = part.live_ids()
            chunks.append(ids[_tombstone_mask(ids, ts)])
        live_ids = np.sort(np.concatenate(chunks)) if chunks else np.zeros(0, dtype=np.int64)
        with open(os.path.join(path, "insert_params.bin"), "wb") as f:
            f.write(self.insert_params.to_bytes())
        with open(os.path.join(path, "search_params.bin"), "wb") as f:
            f.write(self.search_params.to_bytes())
        with open(os.path.join(path, "partitions.bin"), "wb") as f:
            f.write(serialize_partitions(self.partitions, compact=True))
        with open(os.path.join(path, "full_vectors.bin"), "wb") as f:
            f.write(self.full.to_bytes(live_ids))
        manifest = {
            "version": CHECKPOINT_VERSION,
            "d": self.insert_params.d,
            "d_r": self.insert_params.d_r,
            "m": self.insert_params.m,
            "n_c": self.insert_params.n_partitions,
            "metric": self.metric.value,
            "counts": {"n_vectors": int(live_ids.size), "n_tombstones": 0},
        }
        with open(os.path.join(path, "manifest.json"), "w") as f:
            json.dump(manifest, f, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path: str) -> "FilterRefineIndex":
        with open(os.path.join(path, "manifest.json")) as f:
            manifest = json.load(f)
        if manifest["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest['version']}")
        with open(os.path.join(path, "insert_params.bin"), "rb") as f:
            insert_params = ParamSet.from_bytes(f.read())
        with open(os.path.join(path, "search_params.bin"), "rb") as f:
            search_params = ParamSet.from_bytes(f.read())
        index = cls(insert_params, Metric.parse(manifest["metric"]))
        index.install_search_params(search_params)
        with open(os.path.join(path, "partitions.bin"), "rb") as f:
            index.partitions = deserialize_partitions(f.read(), insert_params.m)
        with open(os.path.join(path, "full_vectors.bin"), "rb") as f:
            index.full = FullVectorStore.from_bytes(f.read(), insert_params.d)
        for pid, part in enumerate(index.partitions.partitions):
            for vid in part.live_ids():
                index._known_ids.add(int(vid))
                index.id_to_pid[int(vid)] = pid
        return index

    # ---------------------------------------------------------- reports

    def live_count(self) -> int:
        ts = self.partitions.tombstone_snapshot()
        total = int(self.partitions.lens().sum())
        if ts.size == 0:
            return total
        return total - self._count_tombstoned(ts)

    def _count_tombstoned(self, ts: np.ndarray) -> int:
        hit = 0
        for part in self.partitions.partitions:
            ids = part.live_ids()
            if ids.size:
                hit += int((~_tombstone_mask(ids, ts)).sum())
        return hit

    def memory_report(self) -> dict[str, float]:
        p = self.insert_params
        n = int(self.partitions.lens().sum())
        report = memory_report(p.d, p.d_r, p.n_partitions, n, p.pq.dsub)
        report["full_bytes"] = len(self.full) * 4 * p.d
        return report
