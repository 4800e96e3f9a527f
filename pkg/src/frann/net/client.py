"""Client orchestration: pick an IndexWorker, fan refine out to shards, merge.

The client owns the cross-worker workflow. Searches hit one IndexWorker
(round-robin, or sticky when session affinity is wanted), split the
candidates over RefineWorkers by the sharding policy, and merge by
(score desc, id asc), which reproduces single-node results exactly.
Writes are broadcast: inserts compute (pid, code) once and replicate it,
deletes tombstone everywhere.
"""

from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..core import top_k_desc
from ..index import ParamSet, SearchConfig
from . import wire

BY_ID = "by_id"
BY_IVF = "by_ivf"


@dataclass
class ClusterConfig:
    """Addresses and sharding policy; every IndexWorker replicates the index."""

    index_workers: list[str]
    refine_workers: list[str]
    sharding: str = BY_ID
    partition_map: list[int] = field(default_factory=list)  # pid -> refine worker

    def __post_init__(self) -> None:
        if not self.index_workers or not self.refine_workers:
            raise ValueError("need at least one worker of each role")
        if self.sharding not in (BY_ID, BY_IVF):
            raise ValueError(f"unknown sharding policy {self.sharding!r}")
        if self.sharding == BY_IVF:
            if not self.partition_map:
                raise ValueError("by_ivf sharding needs a partition map")
            bad = [w for w in self.partition_map if not 0 <= w < len(self.refine_workers)]
            if bad:
                raise ValueError("partition map points at unknown refine workers")

    def shard_of(self, vid: int, pid: int | None = None) -> int:
        if self.sharding == BY_ID:
            return int(vid) % len(self.refine_workers)
        if pid is None:
            raise ValueError("by_ivf routing needs the partition id")
        return self.partition_map[int(pid)]

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(
                {
                    "index_workers": self.index_workers,
                    "refine_workers": self.refine_workers,
                    "sharding": self.sharding,
                    "partition_map": self.partition_map,
                },
                f,
                indent=1,
                sort_keys=True,
            )

    @classmethod
    def from_json(cls, path: str) -> "ClusterConfig":
        with open(path) as f:
            raw = json.load(f)
        return cls(
            raw["index_workers"],
            raw["refine_workers"],
            raw.get("sharding", BY_ID),
            raw.get("partition_map", []),
        )


class WorkerError(RuntimeError):
    """A worker answered with an error envelope."""

    def __init__(self, url: str, code: str, msg: str) -> None:
        super().__init__(f"{url}: [{code}] {msg}")
        self.code = code


def _post(url: str, path: str, payload: dict, timeout: float) -> dict:
    blob = json.dumps(payload).encode()
    req = urllib.request.Request(
        url + path, data=blob, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            body = json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        body = json.loads(exc.read())
    if body.get("status") != "ok":
        error = body.get("error", {})
        raise WorkerError(url, error.get("code", "unknown"), error.get("msg", ""))
    return body["payload"]


def _get(url: str, path: str, timeout: float) -> dict:
    with urllib.request.urlopen(url + path, timeout=timeout) as resp:
        body = json.loads(resp.read())
    if body.get("status") != "ok":
        error = body.get("error", {})
        raise WorkerError(url, error.get("code", "unknown"), error.get("msg", ""))
    return body["payload"]


@dataclass
class ClientSearchResult:
    ids: np.ndarray
    scores: np.ndarray
    stats: dict


class Client:
    def __init__(self, config: ClusterConfig, sticky: bool = False, timeout: float = 30.0) -> None:
        self.config = config
        self.sticky = sticky
        self.timeout = timeout
        self._rr = 0
        self._rr_lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=max(4, len(config.refine_workers)))

    def close(self) -> None:
        self._pool.shutdown(wait=False)

    # ---------------------------------------------------------- routing

    def _pick_index_worker(self) -> int:
        if self.sticky:
            return 0
        with self._rr_lock:
            chosen = self._rr
            self._rr = (self._rr + 1) % len(self.config.index_workers)
        return chosen

    def _post_index(self, worker: int, path: str, payload: dict, retry: bool = True) -> dict:
        """POST to one IndexWorker, retrying once on a different replica."""
        url = self.config.index_workers[worker]
        try:
            return _post(url, path, payload, self.timeout)
        except (urllib.error.URLError, ConnectionError, TimeoutError):
            if not retry or len(self.config.index_workers) < 2:
                raise
            alt = (worker + 1) % len(self.config.index_workers)
            return _post(self.config.index_workers[alt], path, payload, self.timeout)

    # ----------------------------------------------------------- search

    def search(self, x: np.ndarray, cfg: SearchConfig) -> ClientSearchResult:
        payload = {
            "vector": wire.encode_f32(x),
            "k": cfg.k,
            "k_factor": cfg.k_factor,
            "nprobe": cfg.nprobe,
            "et_enabled": cfg.et_enabled,
            "et_t": cfg.et_t,
            "et_nt": cfg.et_nt,
            "ivf_q8": cfg.ivf_q8,
            "lut_q8": cfg.lut_q8,
        }
        reply = self._post_index(self._pick_index_worker(), "/v1/filter", payload)
        cand_ids = wire.ids_from_wire(reply["ids"])
        cand_pids = reply["pids"]
        stats = dict(reply.get("stats", {}))
        if cand_ids.size == 0:
            return ClientSearchResult(np.zeros(0, dtype=np.int64), np.zeros(0), stats)
        groups: dict[int, list[int]] = {}
        for vid, pid in zip(cand_ids, cand_pids):
            groups.setdefault(self.config.shard_of(int(vid), int(pid)), []).append(int(vid))
        futures = {
            self._pool.submit(
                _post,
                self.config.refine_workers[shard],
                "/v1/refine",
                {"vector": wire.encode_f32(x), "ids": wire.ids_to_wire(ids), "k": cfg.k},
                self.timeout,
            ): shard
            for shard, ids in groups.items()
        }
        all_ids: list[int] = []
        all_scores: list[float] = []
        n_missing = 0
        for fut in futures:
            part = fut.result()
            all_ids.extend(int(v) for v in part["ids"])
            all_scores.extend(float(s) for s in part["scores"])
            n_missing += len(part["missing"])
        stats["refine_missing"] = n_missing
        scores, ids = top_k_desc(
            np.asarray(all_scores, dtype=np.float64), np.asarray(all_ids, dtype=np.int64), cfg.k
        )
        return ClientSearchResult(ids, scores, stats)

    # ----------------------------------------------------------- writes

    def insert(self, vid: int, vector: np.ndarray) -> dict:
        """Compute the encoding once, store the full vector, broadcast codes."""
        worker = self._pick_index_worker()
        encoded = self._post_index(
            worker, "/v1/insert_index", {"id": str(int(vid)), "vector": wire.encode_f32(vector)}
        )
        pid = int(encoded["pid"])
        shard = self.config.shard_of(int(vid), pid)
        _post(
            self.config.refine_workers[shard],
            "/v1/insert_full",
            {"id": str(int(vid)), "vector": wire.encode_f32(vector)},
            self.timeout,
        )
        apply_payload = {"id": str(int(vid)), "pid": pid, "code": encoded["code"]}
        acks = 0
        failures: list[str] = []
        for url in self.config.index_workers:
            try:
                _post(url, "/v1/insert_index", apply_payload, self.timeout)
                acks += 1
            except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
                failures.append(f"{url}: {exc}")
        if acks == 0:
            raise RuntimeError(f"insert {vid}: no IndexWorker applied; {failures}")
        return {"pid": pid, "acks": acks, "failures": failures}

    def delete(self, ids) -> dict:
        payload = {"ids": wire.ids_to_wire(ids)}
        acks = 0
        failures: list[str] = []
        for url in self.config.index_workers:
            try:
                _post(url, "/v1/delete", payload, self.timeout)
                acks += 1
            except (urllib.error.URLError, ConnectionError, TimeoutError) as exc:
                failures.append(f"{url}: {exc}")
        if acks == 0:
            raise RuntimeError(f"delete: no IndexWorker reachable; {failures}")
        return {"acks": acks, "failures": failures}

    def install_params(self, params: ParamSet | bytes) -> dict:
        blob = params if isinstance(params, bytes) else params.to_bytes()
        payload = {"params": wire.encode_bytes(blob)}
        results = {}
        for url in self.config.index_workers:
            results[url] = _post(url, "/v1/install", payload, self.timeout)
        return results

    def stats(self) -> dict[str, dict]:
        out = {}
        for url in self.config.index_workers + self.config.refine_workers:
            out[url] = _get(url, "/v1/stats", self.timeout)
        return out
