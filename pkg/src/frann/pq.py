"""Product quantization: codebooks, encoding, LUT scoring, packed code blocks.

Codes are 4 bits (16 centroids per subspace). Scoring a query against codes
goes through a per-subspace lookup table so a code's score is the sum of M
table entries. The packed block layout groups 32 codes with their nibbles
transposed per subspace, which is what the scan kernels consume; a scalar
reference path defines correctness and the blocked path must match it
bit-for-bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .clustering import KMeansConfig, kmeans
from .core import Metric, Transform, as_f32c, row_stable_matmul

KSUB = 16  # centroids per subspace, fixed by the 4-bit code width
BLOCK = _kernels.BLOCK


@dataclass
class PQCodebook:
    """Per-subspace centroid tables, shape (M, 16, dsub)."""

    centroids: np.ndarray

    def __post_init__(self) -> None:
        self.centroids = as_f32c(self.centroids)
        if self.centroids.ndim != 3 or self.centroids.shape[1] != KSUB:
            raise ValueError(
                f"centroids must be (M, {KSUB}, dsub), got {self.centroids.shape}"
            )

    @property
    def m(self) -> int:
        return self.centroids.shape[0]

    @property
    def dsub(self) -> int:
        return self.centroids.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.dsub

    def copy(self) -> "PQCodebook":
        return PQCodebook(self.centroids.copy())


def split_subspaces(x: np.ndarray, m: int) -> np.ndarray:
    """View (n, d_r) rows as (n, m, dsub) subvectors."""
    x = np.atleast_2d(x)
    n, d = x.shape
    if d % m:
        raise ValueError(f"dim {d} not divisible by {m} subspaces")
    return x.reshape(n, m, d // m)


def pq_train(x: np.ndarray, m: int, seed: int = 0, max_iters: int = 25) -> PQCodebook:
    """Train one 16-centroid k-means codebook per subspace."""
    x = as_f32c(np.atleast_2d(x))
    sub = split_subspaces(x, m)
    master = np.random.default_rng(seed)
    cents = np.empty((m, KSUB, sub.shape[2]), dtype=np.float32)
    for j in range(m):
        cfg = KMeansConfig(KSUB, max_iters=max_iters, seed=int(master.integers(2**31)))
        cents[j] = kmeans(sub[:, j, :], cfg).centroids
    return PQCodebook(cents)


def pq_encode(cb: PQCodebook, x: np.ndarray) -> np.ndarray:
    """Nearest-centroid code per subspace, ties to the lowest code.

    Distances reduce within each row only, so codes do not depend on what
    else is in the batch.
    """
    sub = split_subspaces(as_f32c(np.atleast_2d(x)), cb.m)
    n = sub.shape[0]
    codes = np.empty((n, cb.m), dtype=np.uint8)
    for j in range(cb.m):
        diff = sub[:, j, None, :] - cb.centroids[j][None, :, :]
        d2 = (diff * diff).sum(axis=2)
        codes[:, j] = d2.argmin(axis=1)
    return codes


def pq_decode(cb: PQCodebook, codes: np.ndarray) -> np.ndarray:
    """Reconstruct (n, d_r) vectors from codes."""
    codes = np.atleast_2d(codes)
    n = codes.shape[0]
    out = np.empty((n, cb.m, cb.dsub), dtype=np.float32)
    for j in range(cb.m):
        out[:, j, :] = cb.centroids[j][codes[:, j]]
    return out.reshape(n, cb.dim)


def compute_lut(cb: PQCodebook, x_r: np.ndarray, metric: Metric) -> np.ndarray:
    """Per-subspace score table (M, 16) for one reduced query."""
    x_r = np.asarray(x_r)
    if x_r.shape != (cb.dim,):
        raise ValueError(f"query shape {x_r.shape}, expected ({cb.dim},)")
    x_sub = split_subspaces(as_f32c(x_r), cb.m)[0]
    if metric is Metric.IP:
        return (cb.centroids * x_sub[:, None, :]).sum(axis=2)
    diff = cb.centroids - x_sub[:, None, :]
    return -(diff * diff).sum(axis=2)


def adc_score(lut: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Scalar reference ADC: per code, sum one table entry per subspace.

    Accumulates float32 left to right over subspaces, matching the blocked
    kernels exactly.
    """
    codes = np.atleast_2d(codes)
    acc = np.zeros(codes.shape[0], dtype=np.float32)
    for j in range(codes.shape[1]):
        acc += lut[j, codes[:, j]]
    return acc


@dataclass
class QuantizedLUT:
    """8-bit table with one global scale and additive bias."""

    q: np.ndarray  # (M, 16) uint8
    scale: float
    bias: float


def quantize_lut(lut: np.ndarray) -> QuantizedLUT:
    """Shift each subspace row to zero and scale the table into 0..255."""
    lut = np.asarray(lut, dtype=np.float32)
    row_min = lut.min(axis=1)
    delta = lut - row_min[:, None]
    top = float(delta.max())
    step = top / 255.0 if top > 0.0 else 1.0
    q = np.clip(np.rint(delta / step), 0, 255).astype(np.uint8)
    return QuantizedLUT(q, float(step), float(row_min.astype(np.float64).sum()))


def adc_score_q8(qlut: QuantizedLUT, codes: np.ndarray) -> np.ndarray:
    """Scalar reference for the quantized-table path, bit-equal to kernels."""
    codes = np.atleast_2d(codes)
    acc = np.zeros(codes.shape[0], dtype=np.uint32)
    for j in range(codes.shape[1]):
        acc += qlut.q[j, codes[:, j]]
    return acc.astype(np.float32) * np.float32(qlut.scale) + np.float32(qlut.bias)


class CodeBlockArray:
    """Append-only packed code storage in 32-code blocks.

    Block layout is (M, 16) bytes: byte ``j*16 + lane//2`` holds the codes
    of lane and lane+1 in subspace j, low nibble first. Appends write data
    before publishing the new count, so a reader that snapshots ``count``
    and then takes the ``blocks`` reference sees fully written codes.
    """

    def __init__(self, m: int) -> None:
        self.m = m
        self.count = 0
        self.blocks = np.zeros((0, m, BLOCK // 2), dtype=np.uint8)

    def _ensure_capacity(self, total: int) -> None:
        need = (total + BLOCK - 1) // BLOCK
        if need <= self.blocks.shape[0]:
            return
        grown = max(need, 2 * self.blocks.shape[0], 4)
        fresh = np.zeros((grown, self.m, BLOCK // 2), dtype=np.uint8)
        fresh[: self.blocks.shape[0]] = self.blocks
        self.blocks = fresh

    def append(self, codes: np.ndarray) -> None:
        codes = np.atleast_2d(np.asarray(codes, dtype=np.uint8))
        if codes.shape[1] != self.m:
            raise ValueError(f"expected {self.m} subspaces, got {codes.shape[1]}")
        k = codes.shape[0]
        if k == 0:
            return
        self._ensure_capacity(self.count + k)
        # Repack the whole affected block range: existing codes in the
        # partial tail block keep their values, so concurrent readers of the
        # published prefix never observe a change.
        first = (self.count >> 5) << 5
        merged = np.concatenate([self.get_codes(first, self.count), codes])
        pad = (-merged.shape[0]) % BLOCK
        if pad:
            merged = np.concatenate([merged, np.zeros((pad, self.m), dtype=np.uint8)])
        region = merged.reshape(-1, BLOCK, self.m)
        packed = region[:, 0::2, :] | (region[:, 1::2, :] << 4)  # low nibble first
        b0 = first >> 5
        self.blocks[b0 : b0 + region.shape[0]] = packed.transpose(0, 2, 1)
        self.count += k  # publish after the writes above

    def get_codes(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Unpack codes [start, stop) back to (n, M) uint8."""
        stop = self.count if stop is None else stop
        idx = np.arange(start, stop)
        lane = idx & 31
        packed = self.blocks[idx >> 5, :, lane >> 1]  # (n, M)
        shift = ((lane & 1) * 4).astype(np.uint8)
        return ((packed >> shift[:, None]) & 0x0F).astype(np.uint8)

    def scan_f32(self, lut: np.ndarray, count: int, out: np.ndarray) -> None:
        _kernels.scan_codes_f32(self.blocks, count, as_f32c(lut), out)

    def scan_q8(self, qlut: QuantizedLUT, count: int, out: np.ndarray) -> None:
        _kernels.scan_codes_q8(
            self.blocks, count, np.ascontiguousarray(qlut.q), qlut.scale, qlut.bias, out
        )


def pack_codes(codes: np.ndarray) -> bytes:
    """Pack (n, M) codes into nibbles in row-major order, low nibble first."""
    flat = np.asarray(codes, dtype=np.uint8).reshape(-1)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
    return (flat[0::2] | (flat[1::2] << 4)).tobytes()


def unpack_codes(buf: bytes, n: int, m: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    flat = np.empty(raw.size * 2, dtype=np.uint8)
    flat[0::2] = raw & 0x0F
    flat[1::2] = raw >> 4
    return flat[: n * m].reshape(n, m).copy()


MAGIC = b"HKPQ1"


def save_codebook(cb: PQCodebook, path: str) -> None:
    with open(path, "wb") as f:
        f.write(codebook_to_bytes(cb))


def codebook_to_bytes(cb: PQCodebook) -> bytes:
    head = MAGIC + struct.pack("<III", cb.m, cb.dsub, KSUB)
    return head + cb.centroids.astype("<f4").tobytes()


def codebook_from_bytes(buf: bytes) -> PQCodebook:
    if buf[:5] != MAGIC:
        raise ValueError("bad codebook magic")
    m, dsub, ksub = struct.unpack("<III", buf[5:17])
    if ksub != KSUB:
        raise ValueError(f"unsupported ksub {ksub}")
    body = np.frombuffer(buf, dtype="<f4", count=m * ksub * dsub, offset=17)
    return PQCodebook(body.reshape(m, ksub, dsub).copy())


def load_codebook(path: str) -> PQCodebook:
    with open(path, "rb") as f:
        return codebook_from_bytes(f.read())


def _encode64(cents: np.ndarray, y: np.ndarray) -> np.ndarray:
    """float64 encoder used during codebook optimization."""
    m, _, dsub = cents.shape
    sub = y.reshape(y.shape[0], m, dsub)
    codes = np.empty((y.shape[0], m), dtype=np.int64)
    for j in range(m):
        diff = sub[:, j, None, :] - cents[j][None, :, :]
        codes[:, j] = (diff * diff).sum(axis=2).argmin(axis=1)
    return codes


def _decode64(cents: np.ndarray, codes: np.ndarray) -> np.ndarray:
    m, _, dsub = cents.shape
    out = np.empty((codes.shape[0], m, dsub))
    for j in range(m):
        out[:, j, :] = cents[j][codes[:, j]]
    return out.reshape(codes.shape[0], m * dsub)


def opq_init(
    x: np.ndarray,
    d_out: int,
    m: int,
    seed: int = 0,
    iters: int = 8,
) -> tuple[Transform, PQCodebook, list[float]]:
    """Jointly fit a reducing transform and codebook on a training sample.

    Starts from the top principal directions, then alternates encoding,
    centroid updates, and a least-squares refit of the transform. Returns
    the per-iteration reconstruction error, which is non-increasing.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    if d_out > d:
        raise ValueError(f"cannot expand dim {d} to {d_out}")
    if d_out % m:
        raise ValueError(f"d_out {d_out} not divisible by {m}")
    gram = x.T @ x
    _, vecs = np.linalg.eigh(gram)
    a = vecs[:, ::-1][:, :d_out].copy()  # top directions, descending variance
    y = x @ a
    cents = pq_train(as_f32c(y), m, seed=seed).centroids.astype(np.float64)
    history: list[float] = []
    for _ in range(max(1, iters)):
        codes = _encode64(cents, y)
        err = y - _decode64(cents, codes)
        history.append(float((err * err).sum()))
        # Lloyd update of each subspace codebook under the fixed codes
        dsub = d_out // m
        sub = y.reshape(n, m, dsub)
        for j in range(m):
            counts = np.bincount(codes[:, j], minlength=KSUB)
            sums = np.zeros((KSUB, dsub))
            np.add.at(sums, codes[:, j], sub[:, j, :])
            live = counts > 0
            cents[j][live] = sums[live] / counts[live, None]
        recon = _decode64(cents, codes)
        a = np.linalg.lstsq(x, recon, rcond=None)[0]
        y = x @ a
    transform = Transform(as_f32c(a), np.zeros(d_out, dtype=np.float32))
    return transform, PQCodebook(as_f32c(cents)), history


def encode_for_insert(transform: Transform, cb: PQCodebook, x: np.ndarray) -> np.ndarray:
    """Reduce then encode rows, the write-path composition."""
    return pq_encode(cb, transform.apply(np.atleast_2d(x)))
