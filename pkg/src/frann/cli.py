"""Command-line interface: data prep, index lifecycle, serving, benchmarks."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench
from .clustering import sample_rows
from .core import Dataset, Metric
from .index import FilterRefineIndex, ParamSet, SearchConfig
from .net.client import Client, ClusterConfig
from .net.workers import IndexWorker, RefineWorker
from .train import TrainConfig, prepare_training_set, recompute_ivf_centroids, train


def _load_dataset(path: str) -> Dataset:
    return Dataset(bench.read_fvecs(path))


def _metric(args) -> Metric:
    return Metric.parse(args.metric)


def _emit(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path:
        with open(path, "w") as f:
            f.write(text + "\n")
    print(text)


# ------------------------------------------------------------- subcommands


def cmd_ingest(args) -> None:
    ds = bench.ingest(args.input, args.format, d=args.dim, normalize=args.normalize)
    bench.write_fvecs(args.out, ds.vectors)
    _emit({"n": ds.n, "d": ds.dim, "out": args.out}, None)


def cmd_synth(args) -> None:
    ds = bench.synth(args.n, args.dim, args.clusters, std=args.std, seed=args.seed)
    bench.write_fvecs(args.out, ds.vectors)
    summary = {"n": ds.n, "d": ds.dim, "out": args.out}
    if args.queries_out:
        qs = bench.synth(
            args.n_queries,
            args.dim,
            args.clusters,
            std=args.std,
            seed=args.seed + 1,
            center_seed=args.seed,
        )
        bench.write_fvecs(args.queries_out, qs.vectors)
        summary["queries_out"] = args.queries_out
        summary["n_queries"] = args.n_queries
    _emit(summary, None)


def cmd_gt(args) -> None:
    data = _load_dataset(args.data)
    queries = bench.read_fvecs(args.queries)
    gt = bench.ground_truth(data, queries, args.k, _metric(args))
    gt.save(args.out)
    _emit({"n_queries": queries.shape[0], "k": gt.k, "out": args.out}, None)


def cmd_build(args) -> None:
    data = _load_dataset(args.data)
    index = FilterRefineIndex.build_base(
        data,
        n_partitions=args.n_partitions,
        d_r=args.d_r,
        m=args.m,
        metric=_metric(args),
        seed=args.seed,
        train_sample=args.train_sample,
        opq_iters=args.opq_iters,
    )
    index.checkpoint(args.out)
    _emit({"out": args.out, "memory": index.memory_report()}, None)


def cmd_train(args) -> None:
    index = FilterRefineIndex.load(args.index)
    metric = index.metric
    ts = prepare_training_set(
        index,
        n_s=args.n_samples,
        k_neighbors=args.k_neighbors,
        nprobe=args.nprobe,
        k_factor=args.k_factor,
        seed=args.seed,
        val_fraction=args.val_fraction,
    )
    cfg = TrainConfig(
        lam=args.lam,
        lr=args.lr,
        batch=args.batch,
        max_epochs=args.max_epochs,
        stop_delta=args.stop_delta,
        seed=args.seed,
        weight_decay=args.weight_decay,
        log_path=args.log,
    )
    result = train(ts, index.insert_params, cfg, metric)
    new_ivf = recompute_ivf_centroids(ts.queries, index.insert_params, result.params, metric)
    params = result.params.to_param_set(new_ivf)
    with open(args.out, "wb") as f:
        f.write(params.to_bytes())
    if args.apply:
        index.install_search_params(params)
        index.checkpoint(args.index)
    _emit(
        {
            "out": args.out,
            "epochs_run": result.epochs_run,
            "best_epoch": result.best_epoch,
            "val_loss_initial": result.val_losses[0],
            "val_loss_best": min(result.val_losses),
        },
        None,
    )


def _sweep_target(args):
    if args.cluster:
        return Client(ClusterConfig.from_json(args.cluster))
    return FilterRefineIndex.load(args.index)


def cmd_sweep(args) -> None:
    target = _sweep_target(args)
    queries = bench.read_fvecs(args.queries)
    gt = bench.GroundTruth.load(args.gt)
    configs = [
        SearchConfig(
            k=args.k,
            k_factor=args.k_factor,
            nprobe=int(p),
            et_enabled=args.et,
            et_t=args.et_t,
            et_nt=args.et_nt,
            ivf_q8=args.ivf_q8,
        )
        for p in args.nprobes.split(",")
    ]
    rows = bench.sweep(target, queries, gt, configs, clients=args.clients, warmup=args.warmup)
    if args.csv:
        bench.write_csv(args.csv, rows)
    _emit({"rows": rows}, args.json)


def cmd_rw(args) -> None:
    if args.cluster:
        from .bench import _ClusterTarget

        target = _ClusterTarget(Client(ClusterConfig.from_json(args.cluster)))
        index = None
    else:
        index = FilterRefineIndex.load(args.index)
        target = index
    data = _load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    q_idx = sample_rows(data.n, args.n_queries, rng)
    query_pool = data.vectors[q_idx]
    base = data.vectors[sample_rows(data.n, args.insert_pool, rng)]
    insert_pool = (base + rng.normal(0, 0.05, base.shape)).astype(np.float32)
    id_start = int(data.ids.max()) + 1 if data.n else 0
    spec = bench.WorkloadSpec(
        read_ratio=args.ratio,
        clients=args.clients,
        duration_s=args.duration,
        search_cfg=SearchConfig(k=args.k, k_factor=args.k_factor, nprobe=args.nprobe),
        seed=args.seed,
    )

    def live_lookup():
        assert index is not None
        ts = set(int(v) for v in index.partitions.tombstone_snapshot())
        ids = [i for i in index.full.ids_sorted() if int(i) not in ts]
        mat = np.stack([index.full.get(int(i)) for i in ids])
        return Dataset(mat, np.asarray(ids, dtype=np.int64))

    report = bench.run_readwrite(
        target,
        spec,
        query_pool,
        insert_pool,
        id_start,
        live_lookup=live_lookup if index is not None else None,
        metric=index.metric if index is not None else Metric.IP,
    )
    if args.csv:
        bench.write_csv(args.csv, [report.as_dict()])
    _emit(report.as_dict(), args.json)


def cmd_serve_index(args) -> None:
    index = FilterRefineIndex.load(args.index)
    worker = IndexWorker(
        index,
        host=args.host,
        port=args.port,
        batch_window_s=args.batch_window_ms / 1e3,
        batch_cap=args.batch_cap,
    )
    print(f"index worker on {worker.address}", file=sys.stderr)
    worker.serve_forever()


def cmd_serve_refine(args) -> None:
    index = FilterRefineIndex.load(args.index)
    cluster = ClusterConfig.from_json(args.cluster)
    store = index.full
    if len(cluster.refine_workers) > 1:
        from .index import FullVectorStore

        shard = FullVectorStore(index.insert_params.d)
        for vid in store.ids_sorted():
            pid = index.id_to_pid.get(int(vid))
            if cluster.shard_of(int(vid), pid) == args.slot:
                shard.add([int(vid)], store.get(int(vid))[None, :])
        store = shard
    worker = RefineWorker(store, index.metric, host=args.host, port=args.port)
    print(f"refine worker (slot {args.slot}) on {worker.address}", file=sys.stderr)
    worker.serve_forever()


def cmd_install(args) -> None:
    with open(args.params, "rb") as f:
        blob = f.read()
    ParamSet.from_bytes(blob)  # validate before touching any worker
    client = Client(ClusterConfig.from_json(args.cluster))
    _emit(client.install_params(blob), None)


# ------------------------------------------------------------------ parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="frann", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, fn, help_text: str) -> argparse.ArgumentParser:
        p = subs.add_parser(name, help=help_text)
        p.set_defaults(fn=fn)
        p.add_argument("--config", help="JSON file with default values for this command")
        registry[name] = p
        return p

    p = sub("ingest", cmd_ingest, "convert a vector file to fvecs")
    p.add_argument("--input", required=True)
    p.add_argument("--format", default="fvecs", choices=["fvecs", "bvecs", "ivecs", "raw_f32"])
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", required=True)

    p = sub("synth", cmd_synth, "generate a Gaussian-mixture dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--clusters", type=int, default=32)
    p.add_argument("--std", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--queries-out")
    p.add_argument("--n-queries", type=int, default=1000)

    p = sub("gt", cmd_gt, "brute-force ground truth")
    p.add_argument("--data", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--metric", default="ip")
    p.add_argument("--out", required=True)

    p = sub("build", cmd_build, "build the base index and checkpoint it")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-partitions", type=int, required=True)
    p.add_argument("--d-r", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--metric", default="ip")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-sample", type=int, default=100_000)
    p.add_argument("--opq-iters", type=int, default=8)

    p = sub("train", cmd_train, "fine-tune search-side parameters")
    p.add_argument("--index", required=True, help="checkpoint directory")
    p.add_argument("--n-samples", type=int, default=10_000)
    p.add_argument("--k-neighbors", type=int, default=50)
    p.add_argument("--nprobe", type=int, required=True)
    p.add_argument("--k-factor", type=int, default=10)
    p.add_argument("--lam", "--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=512)
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--stop-delta", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output parameter file")
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--apply", action="store_true", help="also install into the checkpoint")

    p = sub("sweep", cmd_sweep, "throughput/recall sweep")
    p.add_argument("--index")
    p.add_argument("--cluster", help="cluster config JSON (overrides --index)")
    p.add_argument("--queries", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--k-factor", type=int, default=10)
    p.add_argument("--nprobes", default="1,2,4,8,16,32")
    p.add_argument("--et", action="store_true")
    p.add_argument("--et-t", type=float, default=None)
    p.add_argument("--et-nt", type=int, default=10)
    p.add_argument("--ivf-q8", action="store_true")
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--csv")
    p.add_argument("--json")

    p = sub("rw", cmd_rw, "concurrent read-write workload")
    p.add_argument("--index")
    p.add_argument("--cluster")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=float, default=0.8, help="read ratio")
    p.add_argument("--clients", type=int, default=32)
    p.add_argument("--duration", type=float, default=30.0)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--k-factor", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=8)
    p.add_argument("--n-queries", type=int, default=200)
    p.add_argument("--insert-pool", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.add_argument("--json")

    p = sub("serve-index", cmd_serve_index, "run an IndexWorker")
    p.add_argument("--index", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8601)
    p.add_argument("--batch-window-ms", type=float, default=1.0)
    p.add_argument("--batch-cap", type=int, default=64)

    p = sub("serve-refine", cmd_serve_refine, "run a RefineWorker")
    p.add_argument("--index", required=True)
    p.add_argument("--cluster", required=True)
    p.add_argument("--slot", type=int, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8701)

    p = sub("install", cmd_install, "install parameters on all IndexWorkers")
    p.add_argument("--cluster", required=True)
    p.add_argument("--params", required=True)

    return parser, registry


def main(argv: list[str] | None = None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        with open(args.config) as f:
            overrides = json.load(f)
        registry[args.command].set_defaults(**overrides)
        args = parser.parse_args(argv)  # explicit flags still win
    args.fn(args)


if __name__ == "__main__":
    main()
