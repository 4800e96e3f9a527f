"""Distributed serving: HTTP workers, wire schema, client orchestration."""

from .client import BY_ID, BY_IVF, Client, ClientSearchResult, ClusterConfig, WorkerError
from .workers import IndexWorker, RefineWorker

__all__ = [
    "BY_ID",
    "BY_IVF",
    "Client",
    "ClientSearchResult",
    "ClusterConfig",
    "IndexWorker",
    "RefineWorker",
    "WorkerError",
]
