"""Filter-and-refine vector search with learned compression parameters.

Public surface: the index and its configs, training entry points, the
benchmark helpers, and the distributed workers/client under `frann.net`.
"""

from ._kernels import backend_name
from .core import Dataset, Metric, Transform
from .index import (
    FilterRefineIndex,
    FullVectorStore,
    ParamSet,
    SearchConfig,
    SearchResult,
    memory_report,
)
from .train import TrainConfig, TrainingSet, prepare_training_set, recompute_ivf_centroids, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FilterRefineIndex",
    "FullVectorStore",
    "Metric",
    "ParamSet",
    "SearchConfig",
    "SearchResult",
    "TrainConfig",
    "TrainingSet",
    "Transform",
    "backend_name",
    "memory_report",
    "prepare_training_set",
    "recompute_ivf_centroids",
    "train",
]
