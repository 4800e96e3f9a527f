"""Shared math primitives and the dataset container.

Every score or transform used on the serving path goes through the helpers
here. They are written so that each output row depends only on its own
input row (fixed-shape BLAS calls, per-row reductions), which makes batched
evaluation bit-identical to one-at-a-time evaluation. Several consistency
guarantees elsewhere in the package lean on that property.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# Rows per BLAS call in row_stable_matmul. Tail chunks are zero-padded to
# this size so the gemm shape never varies with batch size.
MATMUL_CHUNK = 512


class Metric(enum.Enum):
    """Similarity metric. Scores are oriented so higher means closer."""

    IP = "ip"
    L2 = "l2"

    @classmethod
    def parse(cls, name: str) -> "Metric":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown metric {name!r}, expected 'ip' or 'l2'") from None


def as_f32c(x: np.ndarray) -> np.ndarray:
    """Return x as C-contiguous float32 without copying when already so."""
    return np.ascontiguousarray(x, dtype=np.float32)


def similarity(
    vectors: np.ndarray,
    query: np.ndarray,
    metric: Metric,
    out_dtype: np.dtype | type = np.float32,
) -> np.ndarray:
    """Score each row of `vectors` against one query, higher is closer.

    IP scores are inner products; L2 scores are negated squared distances.
    The reduction runs within each row only, so the score of a row does not
    depend on which other rows are in the batch.
    """
    vectors = np.asarray(vectors)
    query = np.asarray(query)
    if vectors.ndim != 2 or query.ndim != 1 or vectors.shape[1] != query.shape[0]:
        raise ValueError(
            f"shape mismatch: vectors {vectors.shape} vs query {query.shape}"
        )
    dt = np.dtype(out_dtype)
    v = vectors.astype(dt, copy=False)
    q = query.astype(dt, copy=False)
    if metric is Metric.IP:
        return (v * q).sum(axis=1)
    diff = v - q
    out = (diff * diff).sum(axis=1)
    return -out


def row_stable_matmul(x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Compute x @ a in float32 with batch-size-independent row results.

    Plain float32 gemm picks different accumulation orders for different M,
    so the same input row can produce slightly different outputs depending
    on batch size. Processing fixed 512-row chunks (zero-padding the tail)
    keeps the call shape constant and each output row reproducible.
    """
    x = as_f32c(x)
    a = as_f32c(a)
    if x.ndim != 2 or a.ndim != 2 or x.shape[1] != a.shape[0]:
        raise ValueError(f"shape mismatch: {x.shape} @ {a.shape}")
    n = x.shape[0]
    out = np.empty((n, a.shape[1]), dtype=np.float32)
    if n == 0:
        return out
    pad = np.zeros((MATMUL_CHUNK, x.shape[1]), dtype=np.float32)
    for start in range(0, n, MATMUL_CHUNK):
        stop = min(start + MATMUL_CHUNK, n)
        m = stop - start
        if m == MATMUL_CHUNK:
            out[start:stop] = x[start:stop] @ a
        else:
            pad[:m] = x[start:stop]
            pad[m:] = 0.0
            out[start:stop] = (pad @ a)[:m]
    return out


@dataclass
class Transform:
    """Affine map y = x @ A + b reducing dimension d to d_out."""

    A: np.ndarray  # (d, d_out) float32
    b: np.ndarray  # (d_out,) float32

    def __post_init__(self) -> None:
        self.A = as_f32c(self.A)
        self.b = as_f32c(self.b)
        if self.A.ndim != 2:
            raise ValueError("A must be 2-d")
        if self.b.shape != (self.A.shape[1],):
            raise ValueError(f"b shape {self.b.shape} does not match A {self.A.shape}")

    @property
    def dim_in(self) -> int:
        return self.A.shape[0]

    @property
    def dim_out(self) -> int:
        return self.A.shape[1]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Map rows of x; row results are independent of batch size."""
        x = np.asarray(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.dim_in:
            raise ValueError(f"expected dim {self.dim_in}, got {x.shape[1]}")
        y = row_stable_matmul(x, self.A) + self.b
        return y[0] if squeeze else y

    @classmethod
    def identity(cls, dim: int) -> "Transform":
        return cls(np.eye(dim, dtype=np.float32), np.zeros(dim, dtype=np.float32))

    def copy(self) -> "Transform":
        return Transform(self.A.copy(), self.b.copy())


@dataclass
class Dataset:
    """Full-precision vectors with caller-assigned integer ids."""

    vectors: np.ndarray  # (n, d) float32
    ids: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.vectors = as_f32c(np.atleast_2d(self.vectors))
        if self.ids is None:
            self.ids = np.arange(self.vectors.shape[0], dtype=np.int64)
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        self.validate()

    def validate(self) -> None:
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be 2-d")
        if self.ids.shape != (self.vectors.shape[0],):
            raise ValueError(
                f"ids shape {self.ids.shape} does not match {self.vectors.shape[0]} rows"
            )
        if not np.isfinite(self.vectors).all():
            raise ValueError("vectors contain non-finite values")
        if self.ids.size:
            if self.ids.min() < 0:
                raise ValueError("ids must be non-negative")
            if np.unique(self.ids).size != self.ids.size:
                raise ValueError("ids must be unique")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.n


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows; all-zero rows are left as zeros."""
    x = as_f32c(np.atleast_2d(x))
    norms = np.sqrt((x.astype(np.float64) ** 2).sum(axis=1))
    safe = np.where(norms == 0.0, 1.0, norms)
    return as_f32c(x / safe[:, None].astype(np.float32))


def top_k_desc(scores: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Select k entries by score descending, breaking ties by id ascending."""
    scores = np.asarray(scores)
    ids = np.asarray(ids)
    if scores.shape != ids.shape:
        raise ValueError("scores and ids must align")
    k = min(k, scores.shape[0])
    if k == 0:
        return scores[:0], ids[:0]
    order = np.lexsort((ids, -scores))[:k]
    return scores[order], ids[order]
