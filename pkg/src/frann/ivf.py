"""Partition layer: centroid ranking, packed code storage, tombstones.

Partitions are append-only. A reader snapshots the published length first
and then only touches entries below it, so scans run concurrently with
appends without locking; appends themselves are serialized per partition.
Deletes only add ids to a shared tombstone set; space is reclaimed when a
checkpoint rewrites the partitions.
"""

from __future__ import annotations

import heapq
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .core import Metric, as_f32c, row_stable_matmul, similarity
from .pq import BLOCK, CodeBlockArray, QuantizedLUT, pack_codes, unpack_codes


@dataclass
class IVFCentroids:
    """Partition centroids in float32 plus a per-dimension INT8 copy."""

    f32: np.ndarray  # (N_c, d_r)
    q8: np.ndarray  # (N_c, d_r) int8
    scale: np.ndarray  # (d_r,) float32, quantization step per dimension
    offset: np.ndarray  # (d_r,) float32, range midpoint per dimension

    @classmethod
    def from_f32(cls, centroids: np.ndarray) -> "IVFCentroids":
        c = as_f32c(np.atleast_2d(centroids))
        lo = c.min(axis=0).astype(np.float64)
        hi = c.max(axis=0).astype(np.float64)
        step = (hi - lo) / 254.0
        mid = (hi + lo) / 2.0
        safe = np.where(step == 0.0, 1.0, step)
        q = np.clip(np.rint((c - mid) / safe), -127, 127).astype(np.int8)
        return cls(c, q, as_f32c(safe), as_f32c(mid))

    @property
    def n_partitions(self) -> int:
        return self.f32.shape[0]

    @property
    def dim(self) -> int:
        return self.f32.shape[1]

    def dequantized(self) -> np.ndarray:
        return self.q8.astype(np.float32) * self.scale + self.offset


def rank_partitions(
    x_r: np.ndarray,
    centroids: IVFCentroids,
    metric: Metric,
    use_q8: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """All partition ids ordered by score desc, ties by pid asc."""
    target = centroids.dequantized() if use_q8 else centroids.f32
    scores = similarity(target, as_f32c(x_r), metric)
    pids = np.arange(centroids.n_partitions)
    order = np.lexsort((pids, -scores))
    return pids[order], scores[order]


def assign_rows(x_r: np.ndarray, centroids_f32: np.ndarray, metric: Metric) -> np.ndarray:
    """Partition id per reduced row, ties to the lowest pid.

    Built from row-stable pieces (fixed-chunk gemm, per-row norms) so a
    vector lands in the same partition whether it arrives alone or in a
    bulk batch.
    """
    x_r = as_f32c(np.atleast_2d(x_r))
    c = as_f32c(centroids_f32)
    cross = row_stable_matmul(x_r, np.ascontiguousarray(c.T))
    if metric is Metric.IP:
        scores = cross
    else:
        row_sq = (x_r * x_r).sum(axis=1)
        c_sq = (c * c).sum(axis=1)
        scores = 2.0 * cross - row_sq[:, None] - c_sq[None, :]
    return scores.argmax(axis=1).astype(np.int64)


class Partition:
    """Ids plus packed codes for one partition, append-only."""

    def __init__(self, m: int) -> None:
        self.m = m
        self._n = 0
        self._ids = np.zeros(0, dtype=np.int64)
        self.codes = CodeBlockArray(m)
        self.lock = threading.Lock()

    def __len__(self) -> int:
        return self._n

    def append(self, ids: np.ndarray, codes: np.ndarray) -> None:
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        codes = np.atleast_2d(codes)
        if ids.shape[0] != codes.shape[0]:
            raise ValueError("ids and codes length mismatch")
        with self.lock:
            n, k = self._n, ids.shape[0]
            if n + k > self._ids.shape[0]:
                cap = max(n + k, 2 * self._ids.shape[0], BLOCK)
                fresh = np.zeros(cap, dtype=np.int64)
                fresh[:n] = self._ids[:n]
                self._ids = fresh
            self._ids[n : n + k] = ids
            self.codes.append(codes)
            self._n = n + k  # publish last

    def snapshot(self) -> tuple[int, np.ndarray, CodeBlockArray]:
        """Consistent (length, ids, codes) triple for lock-free reading."""
        n = self._n  # read the published length before the storage refs
        return n, self._ids, self.codes

    def live_ids(self) -> np.ndarray:
        n, ids, _ = self.snapshot()
        return ids[:n].copy()


class PartitionSet:
    """All partitions plus the shared tombstone set."""

    def __init__(self, n_partitions: int, m: int) -> None:
        self.partitions = [Partition(m) for _ in range(n_partitions)]
        self.m = m
        self.tombstones: set[int] = set()
        self._ts_lock = threading.Lock()
        self._ts_version = 0
        self._ts_cache: tuple[int, np.ndarray] = (0, np.zeros(0, dtype=np.int64))

    @property
    def n_partitions(self) -> int:
        return len(self.partitions)

    def append(self, pid: int, ids: np.ndarray, codes: np.ndarray) -> None:
        if not 0 <= pid < len(self.partitions):
            raise IndexError(f"partition {pid} out of range")
        self.partitions[pid].append(ids, codes)

    def delete(self, ids) -> None:
        with self._ts_lock:
            self.tombstones.update(int(i) for i in np.atleast_1d(ids))
            self._ts_version += 1

    def tombstone_snapshot(self) -> np.ndarray:
        """Sorted tombstone ids; cached until the set changes."""
        with self._ts_lock:
            version = self._ts_version
            if self._ts_cache[0] != version:
                arr = np.fromiter(self.tombstones, dtype=np.int64, count=len(self.tombstones))
                arr.sort()
                self._ts_cache = (version, arr)
            return self._ts_cache[1]

    def lens(self) -> np.ndarray:
        return np.array([len(p) for p in self.partitions], dtype=np.int64)


def _tombstone_mask(ids: np.ndarray, ts_sorted: np.ndarray) -> np.ndarray:
    """True for ids that are NOT tombstoned."""
    if ts_sorted.size == 0:
        return np.ones(ids.shape[0], dtype=bool)
    pos = np.searchsorted(ts_sorted, ids)
    pos_c = np.minimum(pos, ts_sorted.size - 1)
    return ~((pos < ts_sorted.size) & (ts_sorted[pos_c] == ids))


class TopKCollector:
    """Keeps the best k (score desc, ties id asc) seen so far.

    Backed by a min-heap of (score, -id) tuples, so the root is always the
    entry that would be evicted first.
    """

    def __init__(self, k: int) -> None:
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.heap: list[tuple[float, int]] = []

    def __len__(self) -> int:
        return len(self.heap)

    def add(self, score: float, vid: int) -> bool:
        item = (float(score), -int(vid))
        if len(self.heap) < self.k:
            heapq.heappush(self.heap, item)
            return True
        if item > self.heap[0]:
            heapq.heapreplace(self.heap, item)
            return True
        return False

    def add_batch(self, scores: np.ndarray, ids: np.ndarray) -> int:
        """Offer entries in order; returns how many were accepted."""
        added = 0
        heap = self.heap
        i, n = 0, scores.shape[0]
        while len(heap) < self.k and i < n:
            heapq.heappush(heap, (float(scores[i]), -int(ids[i])))
            added += 1
            i += 1
        if i >= n:
            return added
        rest_s, rest_i = scores[i:], ids[i:]
        # threshold only rises, so anything below it now can never enter
        for ci in np.flatnonzero(rest_s >= heap[0][0]):
            item = (float(rest_s[ci]), -int(rest_i[ci]))
            if item > heap[0]:
                heapq.heapreplace(heap, item)
                added += 1
        return added

    def items(self) -> tuple[np.ndarray, np.ndarray]:
        """Contents as (scores, ids), score desc then id asc."""
        if not self.heap:
            return np.zeros(0, dtype=np.float32), np.zeros(0, dtype=np.int64)
        ordered = sorted(self.heap, key=lambda t: (-t[0], -t[1]))
        scores = np.array([t[0] for t in ordered], dtype=np.float32)
        ids = np.array([-t[1] for t in ordered], dtype=np.int64)
        return scores, ids


def scan_partition(
    partition: Partition,
    lut: np.ndarray,
    ts_sorted: np.ndarray,
    collector: TopKCollector,
    qlut: QuantizedLUT | None = None,
) -> int:
    """Score every live code in one partition into the collector.

    Returns n_added, the number of vectors the collector accepted from
    this partition.
    """
    n, ids_ref, codes = partition.snapshot()
    if n == 0:
        return 0
    out = np.empty(n, dtype=np.float32)
    if qlut is not None:
        codes.scan_q8(qlut, n, out)
    else:
        codes.scan_f32(lut, n, out)
    ids = ids_ref[:n]
    mask = _tombstone_mask(ids, ts_sorted)
    if not mask.all():
        out, ids = out[mask], ids[mask]
    return collector.add_batch(out, ids)


def serialize_partitions(pset: PartitionSet, compact: bool = True) -> bytes:
    """Per partition [pid, len, ids, packed codes], then sorted tombstones.

    With compact=True tombstoned entries are dropped and the tombstone list
    comes out empty.
    """
    ts_sorted = pset.tombstone_snapshot()
    chunks = [struct.pack("<I", pset.n_partitions)]
    for pid, part in enumerate(pset.partitions):
        n, ids_ref, codes = part.snapshot()
        ids = ids_ref[:n]
        code_rows = codes.get_codes(0, n)
        if compact and ts_sorted.size:
            keep = _tombstone_mask(ids, ts_sorted)
            ids, code_rows = ids[keep], code_rows[keep]
        chunks.append(struct.pack("<IQ", pid, ids.shape[0]))
        chunks.append(ids.astype("<u8").tobytes())
        chunks.append(pack_codes(code_rows))
    if compact:
        chunks.append(struct.pack("<Q", 0))
    else:
        chunks.append(struct.pack("<Q", ts_sorted.size))
        chunks.append(ts_sorted.astype("<u8").tobytes())
    return b"".join(chunks)


def deserialize_partitions(buf: bytes, m: int) -> PartitionSet:
    off = 0
    (n_parts,) = struct.unpack_from("<I", buf, off)
    off += 4
    pset = PartitionSet(n_parts, m)
    for _ in range(n_parts):
        pid, n = struct.unpack_from("<IQ", buf, off)
        off += 12
        ids = np.frombuffer(buf, dtype="<u8", count=n, offset=off).astype(np.int64)
        off += 8 * n
        nbytes = (n * m + 1) // 2
        codes = unpack_codes(buf[off : off + nbytes], n, m)
        off += nbytes
        if n:
            pset.partitions[pid].append(ids, codes)
    (n_ts,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if n_ts:
        ts = np.frombuffer(buf, dtype="<u8", count=n_ts, offset=off).astype(np.int64)
        pset.delete(ts)
    return pset
