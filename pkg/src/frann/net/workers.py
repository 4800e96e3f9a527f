"""HTTP workers: filter over the replicated compressed index, sharded refine.

Both workers are thin wrappers around the in-process index types, served
by the stdlib threading HTTP server. The IndexWorker funnels filter
requests through a short batching queue so concurrent queries share one
dimensionality-reduction matrix product; batching never changes a result
because the reduction is row-stable and ranking/scanning run per request.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from ..core import as_f32c, top_k_desc
from ..index import FilterRefineIndex, FullVectorStore, ParamSet, SearchConfig
from . import wire


def search_config_from_payload(body: dict) -> SearchConfig:
    cfg = SearchConfig(
        k=int(body.get("k", 10)),
        k_factor=int(body.get("k_factor", 10)),
        nprobe=int(body.get("nprobe", 1)),
        et_enabled=bool(body.get("et_enabled", False)),
        et_nt=int(body.get("et_nt", 10)),
        ivf_q8=bool(body.get("ivf_q8", False)),
        lut_q8=bool(body.get("lut_q8", False)),
    )
    if body.get("et_t") is not None:
        cfg.et_t = float(body["et_t"])
    return cfg


@dataclass
class _FilterJob:
    vector: np.ndarray
    cfg: SearchConfig
    done: threading.Event
    result: dict | None = None
    error: Exception | None = None


class _Router:
    """Maps (method, path) to handler functions on a worker."""

    def __init__(self) -> None:
        self.posts: dict[str, callable] = {}
        self.gets: dict[str, callable] = {}


def _make_handler(router: _Router):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args) -> None:  # keep test output quiet
            pass

        def _reply(self, code: int, payload: dict) -> None:
            blob = json.dumps(payload).encode()
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(blob)))
            self.end_headers()
            self.wfile.write(blob)

        def _dispatch(self, table: dict, body: dict) -> None:
            fn = table.get(self.path)
            if fn is None:
                self._reply(404, wire.err("not_found", self.path))
                return
            try:
                self._reply(200, wire.ok(fn(body)))
            except (ValueError, KeyError) as exc:
                self._reply(400, wire.err("bad_request", str(exc)))
            except RuntimeError as exc:
                self._reply(503, wire.err("not_ready", str(exc)))
            except Exception as exc:  # pragma: no cover - defensive
                self._reply(500, wire.err("internal", str(exc)))

        def do_POST(self) -> None:
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b"{}"
            try:
                body = json.loads(raw or b"{}")
            except json.JSONDecodeError:
                self._reply(400, wire.err("bad_request", "invalid JSON"))
                return
            self._dispatch(router.posts, body)

        def do_GET(self) -> None:
            self._dispatch(router.gets, {})

    return Handler


class _BaseWorker:
    def __init__(self, host: str, port: int) -> None:
        self.router = _Router()
        self.server = ThreadingHTTPServer((host, port), _make_handler(self.router))
        self.server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self.server.serve_forever()

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread:
            self._thread.join(timeout=5)


class IndexWorker(_BaseWorker):
    """Serves the filter stage and index writes over a replicated index."""

    def __init__(
        self,
        index: FilterRefineIndex,
        host: str = "127.0.0.1",
        port: int = 0,
        batch_window_s: float = 0.001,
        batch_cap: int = 64,
    ) -> None:
        super().__init__(host, port)
        self.index = index
        self.batch_window_s = batch_window_s
        self.batch_cap = batch_cap
        self._jobs: queue.Queue[_FilterJob] = queue.Queue()
        self._batcher = threading.Thread(target=self._batch_loop, daemon=True)
        self._batcher_stop = False
        self._batcher.start()
        self.router.posts.update(
            {
                "/v1/filter": self._h_filter,
                "/v1/insert_index": self._h_insert_index,
                "/v1/delete": self._h_delete,
                "/v1/install": self._h_install,
                "/v1/checkpoint": self._h_checkpoint,
            }
        )
        self.router.gets["/v1/stats"] = self._h_stats

    # ---------------------------------------------------------- batching

    def _batch_loop(self) -> None:
        while not self._batcher_stop:
            try:
                first = self._jobs.get(timeout=0.1)
            except queue.Empty:
                continue
            if first is None:  # shutdown sentinel
                break
            batch = [first]
            deadline = time.monotonic() + self.batch_window_s
            while len(batch) < self.batch_cap:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    nxt = self._jobs.get(timeout=remaining)
                except queue.Empty:
                    break
                if nxt is None:
                    self._batcher_stop = True
                    break
                batch.append(nxt)
            self.process_filter_batch([j for j in batch if j is not None])

    def process_filter_batch(self, jobs: list[_FilterJob]) -> None:
        """Run one batch: shared reduction, per-request ranking and scan."""
        if not jobs:
            return
        try:
            sp = self.index.search_params  # one snapshot for the whole batch
            mat = np.stack([j.vector for j in jobs])
            reduced = sp.transform.apply(mat)
        except Exception as exc:
            for j in jobs:
                j.error = exc
                j.done.set()
            return
        for row, job in enumerate(jobs):
            try:
                ids, scores, stats = self.index._filter_reduced(sp, reduced[row], job.cfg)
                job.result = {
                    "ids": wire.ids_to_wire(ids),
                    "scores": [float(s) for s in scores],
                    "pids": [self.index.id_to_pid[int(v)] for v in ids],
                    "stats": {"partitions_scanned": stats.partitions_scanned},
                }
            except Exception as exc:
                job.error = exc
            job.done.set()

    # ---------------------------------------------------------- handlers

    def _h_filter(self, body: dict) -> dict:
        vector = wire.decode_f32(body["vector"], expect=self.index.insert_params.d)
        job = _FilterJob(vector, search_config_from_payload(body), threading.Event())
        self._jobs.put(job)
        job.done.wait()
        if job.error is not None:
            raise job.error
        assert job.result is not None
        return job.result

    def _h_insert_index(self, body: dict) -> dict:
        vid = int(body["id"])
        if "code" in body:
            # apply mode: replica receives a precomputed (pid, code) row
            code = wire.decode_u8(body["code"])
            self.index.insert_encoded([vid], [int(body["pid"])], code[None, :])
            return {"applied": True}
        vector = wire.decode_f32(body["vector"], expect=self.index.insert_params.d)
        if self.index.has_id(vid):
            raise ValueError(f"duplicate id {vid}")
        pids, codes = self.index.encode_for_insert(vector[None, :])
        return {"pid": int(pids[0]), "code": wire.encode_u8(codes[0])}

    def _h_delete(self, body: dict) -> dict:
        ids = wire.ids_from_wire(body["ids"])
        self.index.delete(ids)
        return {"deleted": len(ids)}

    def _h_install(self, body: dict) -> dict:
        params = ParamSet.from_bytes(wire.decode_bytes(body["params"]))
        self.index.install_search_params(params)
        return {"installed": True}

    def _h_checkpoint(self, body: dict) -> dict:
        self.index.checkpoint(body["path"])
        return {"path": body["path"]}

    def _h_stats(self, body: dict) -> dict:
        ts = self.index.partitions.tombstone_snapshot()
        return {
            "role": "index",
            "n_encoded": int(self.index.partitions.lens().sum()),
            "n_live": self.index.live_count(),
            "n_tombstones": int(ts.size),
            "tombstones": wire.ids_to_wire(ts),
            "partition_lens": [int(v) for v in self.index.partitions.lens()],
        }

    def stop(self) -> None:
        self._batcher_stop = True
        self._jobs.put(None)  # type: ignore[arg-type]
        super().stop()
        self._batcher.join(timeout=5)


class RefineWorker(_BaseWorker):
    """Holds one shard of full vectors and rescores candidates exactly."""

    def __init__(self, store: FullVectorStore, metric, host: str = "127.0.0.1", port: int = 0) -> None:
        super().__init__(host, port)
        self.store = store
        self.metric = metric
        self.router.posts.update(
            {
                "/v1/refine": self._h_refine,
                "/v1/insert_full": self._h_insert_full,
                "/v1/checkpoint": self._h_checkpoint,
            }
        )
        self.router.gets["/v1/stats"] = self._h_stats

    def _h_refine(self, body: dict) -> dict:
        x = wire.decode_f32(body["vector"], expect=self.store.dim)
        ids = wire.ids_from_wire(body["ids"])
        k = int(body.get("k", ids.shape[0]))
        found, scores, missing = self.store.score(as_f32c(x), ids, self.metric)
        top_scores, top_ids = top_k_desc(scores, found, k)
        return {
            "ids": wire.ids_to_wire(top_ids),
            "scores": [float(s) for s in top_scores],
            "missing": wire.ids_to_wire(np.array(missing, dtype=np.int64)),
        }

    def _h_insert_full(self, body: dict) -> dict:
        vid = int(body["id"])
        vector = wire.decode_f32(body["vector"], expect=self.store.dim)
        self.store.add([vid], vector[None, :])
        return {"stored": True}

    def _h_checkpoint(self, body: dict) -> dict:
        with open(body["path"], "wb") as f:
            f.write(self.store.to_bytes())
        return {"path": body["path"]}

    def _h_stats(self, body: dict) -> dict:
        return {"role": "refine", "n_vectors": len(self.store)}
